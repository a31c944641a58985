"""Winner determination for VVCAs.

The allocation maximising ``sum_i w_i v_i(A_i) + lambda_i(A_i)`` is found by
a dynamic program over item pools. ``maw[i, S]`` is the best affine welfare
when the items of ``S`` are all handed to bidders ``0..i`` and ``ab[i, S]``
is the bundle bidder ``i`` takes in that optimum::

    maw[0, S] = score[0, S]
    maw[i, S] = max over B subset of S of maw[i-1, S \\ B] + score[i, B]

with ``score[i, B] = w_i v_i(B) + lambda_i(B)``. The root picks the pool
``S_n`` with the largest ``maw[n-1, S_n]``; items outside it stay unsold.

Tie-breaking is exact (no epsilon): each cell keeps the smallest bundle mask
among equal candidates and the root keeps the smallest pool. Equivalently, the
returned allocation is the optimum with the lexicographically smallest key
``(union, A_{n-1}, ..., A_1)``; :func:`brute_force_winner` uses the same key.
"""

from __future__ import annotations

import itertools
import os
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
from numba import njit, prange

from .domain import AuctionSize, ValuationBatch, ValuationProfile

ORACLE_CAP = 10 ** 7

if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@dataclass(frozen=True)
class Allocation:
    """One bundle mask per bidder; bundles are pairwise disjoint."""

    bundles: tuple

    def __post_init__(self):
        bundles = tuple(int(b) for b in self.bundles)
        seen = 0
        for b in bundles:
            if b < 0:
                raise ValueError("bundle masks must be non-negative")
            if seen & b:
                raise ValueError(f"bundles overlap: {bundles}")
            seen |= b
        object.__setattr__(self, "bundles", bundles)

    def __len__(self):
        return len(self.bundles)

    def __getitem__(self, i):
        return self.bundles[i]

    @property
    def allocated(self) -> int:
        """Mask of all sold items."""
        out = 0
        for b in self.bundles:
            out |= b
        return out


@dataclass
class DpTables:
    maw: np.ndarray
    ab: np.ndarray
    op_count: int


# --------------------------------------------------------------------------
# numba kernels

@njit(cache=True)
def _fill_tables(score, maw, ab):
    n, k = score.shape
    ops = 0
    for s in range(k):
        maw[0, s] = score[0, s]
        ab[0, s] = s
        ops += 1
    for i in range(1, n):
        for s in range(k):
            best = -np.inf
            arg = s
            b = s
            while True:
                c = maw[i - 1, s ^ b] + score[i, b]
                ops += 1
                # b walks downwards, so >= keeps the smallest tied bundle
                if c >= best:
                    best = c
                    arg = b
                if b == 0:
                    break
                b = (b - 1) & s
            maw[i, s] = best
            ab[i, s] = arg
    return ops


LANES = 64


def _solve_block(values, weights, lam, zero_bidder, alloc, maw_star, ops):
    # Profiles are processed LANES at a time with the profile index innermost,
    # so the max over candidates vectorises across the block.
    n_prof, n, k = values.shape
    n_blocks = (n_prof + LANES - 1) // LANES
    for blk in prange(n_blocks):
        p0 = blk * LANES
        nl = min(LANES, n_prof - p0)
        score = np.zeros((n, k, LANES))
        prev = np.empty((k, LANES))
        cur = np.empty((k, LANES))
        ab = np.empty((n, k, LANES), dtype=np.int64)
        for i in range(n):
            for s in range(k):
                for lane in range(nl):
                    if i == zero_bidder:
                        score[i, s, lane] = lam[i, s]
                    else:
                        score[i, s, lane] = weights[i] * values[p0 + lane, i, s] + lam[i, s]
        count = 0
        for s in range(k):
            for lane in range(LANES):
                prev[s, lane] = score[0, s, lane]
                ab[0, s, lane] = s
            count += 1
        for i in range(1, n):
            sc = score[i]
            abi = ab[i]
            for s in range(k):
                best = cur[s]
                arg = abi[s]
                b = s
                pr = prev[0]
                sb = sc[b]
                for lane in range(LANES):
                    best[lane] = pr[lane] + sb[lane]
                    arg[lane] = b
                count += 1
                while b != 0:
                    b = (b - 1) & s
                    pr = prev[s ^ b]
                    sb = sc[b]
                    for lane in range(LANES):
                        c = pr[lane] + sb[lane]
                        # b walks downwards, so >= keeps the smallest tied bundle
                        if c >= best[lane]:
                            best[lane] = c
                            arg[lane] = b
                    count += 1
            prev, cur = cur, prev
        for lane in range(nl):
            top = prev[0, lane]
            pool = 0
            for s in range(1, k):
                if prev[s, lane] > top:
                    top = prev[s, lane]
                    pool = s
            maw_star[p0 + lane] = top
            for i in range(n - 1, -1, -1):
                b = ab[i, pool, lane]
                alloc[p0 + lane, i] = b
                pool ^= b
            ops[p0 + lane] = count


_solve_block_par = njit(parallel=True, cache=True)(_solve_block)
_solve_block_seq = njit(cache=True)(_solve_block)


# --------------------------------------------------------------------------
# sweep accounting

class SweepCounter:
    """Counts batched DP sweeps (one per call of :func:`solve_arrays`)."""

    def __init__(self):
        self.sweeps = 0
        self.profiles = 0
        self.ops = 0


_active_counters: list[SweepCounter] = []


@contextmanager
def count_sweeps():
    counter = SweepCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _params_arrays(params, size: AuctionSize):
    weights = np.ascontiguousarray(params.weights, dtype=np.float64)
    lam = np.ascontiguousarray(params.lam, dtype=np.float64)
    if weights.shape != (size.n_bidders,) or lam.shape != (size.n_bidders, size.n_bundles):
        raise ValueError(
            f"parameters shaped {weights.shape}/{lam.shape} do not fit a {size} auction")
    return weights, lam


def solve_arrays(values: np.ndarray, weights: np.ndarray, lam: np.ndarray,
                 zero_bidder: int = -1, *, parallel: bool = True):
    """Solve every profile of a ``(P, n, 2**m)`` value array.

    ``zero_bidder`` replaces that bidder's valuations by 0 while keeping its
    boosts. Returns ``(alloc (P, n) int64, maw_star (P,), ops (P,) int64)``.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ValueError("values must have shape (P, n, 2**m)")
    n_prof, n, k = values.shape
    if weights.shape != (n,) or lam.shape != (n, k):
        raise ValueError(
            f"parameters shaped {weights.shape}/{lam.shape} do not fit values {values.shape}")
    alloc = np.empty((n_prof, n), dtype=np.int64)
    maw_star = np.empty(n_prof, dtype=np.float64)
    ops = np.empty(n_prof, dtype=np.int64)
    kernel = _solve_block_par if parallel else _solve_block_seq
    kernel(values, np.ascontiguousarray(weights, dtype=np.float64),
           np.ascontiguousarray(lam, dtype=np.float64), int(zero_bidder), alloc, maw_star, ops)
    for counter in _active_counters:
        counter.sweeps += 1
        counter.profiles += n_prof
        counter.ops += int(ops.sum())
    return alloc, maw_star, ops


# --------------------------------------------------------------------------
# public API

def affine_welfare(profile: ValuationProfile, params, alloc: Allocation) -> float:
    weights, lam = _params_arrays(params, profile.size)
    total = 0.0
    for i, b in enumerate(alloc.bundles):
        total = total + (weights[i] * profile.values[i, b] + lam[i, b])
    return float(total)


def dp_tables(profile: ValuationProfile, params) -> DpTables:
    """Run the dynamic program on one profile and return its full tables."""
    weights, lam = _params_arrays(params, profile.size)
    score = weights[:, None] * profile.values + lam
    n, k = score.shape
    maw = np.empty((n, k))
    ab = np.empty((n, k), dtype=np.int64)
    ops = _fill_tables(score, maw, ab)
    return DpTables(maw, ab, int(ops))


def solve_winner(profile: ValuationProfile, params) -> tuple[Allocation, float]:
    weights, lam = _params_arrays(params, profile.size)
    alloc, maw_star, _ = solve_arrays(profile.values[None], weights, lam)
    return Allocation(tuple(alloc[0])), float(maw_star[0])


def solve_winner_batch(batch: ValuationBatch, params, *, parallel: bool = True
                       ) -> list[tuple[Allocation, float]]:
    weights, lam = _params_arrays(params, batch.size)
    alloc, maw_star, _ = solve_arrays(batch.values, weights, lam, parallel=parallel)
    return [(Allocation(tuple(a)), float(w)) for a, w in zip(alloc, maw_star)]


def dp_operation_count(size: AuctionSize) -> int:
    """Inner-loop candidate evaluations of the DP: ``2^m + (n-1) 3^m``."""
    return 2 ** size.n_items + (size.n_bidders - 1) * 3 ** size.n_items


def _assignments(n: int, m: int) -> np.ndarray:
    """Bundle masks ``(N, n)`` of every item -> {unsold, bidder} assignment."""
    owners = np.array(list(itertools.product(range(-1, n), repeat=m)), dtype=np.int64)
    owners = owners.reshape(-1, m)
    bits = (1 << np.arange(m, dtype=np.int64))[None, :]
    return np.stack([np.where(owners == i, bits, 0).sum(axis=1) for i in range(n)], axis=1)


def brute_force_winner(profile: ValuationProfile, params, *, cap: int = ORACLE_CAP
                       ) -> tuple[Allocation, float]:
    """Exhaustive search over all ``(n+1)^m`` allocations (test oracle)."""
    n, m = profile.size.n_bidders, profile.size.n_items
    if (n + 1) ** m > cap:
        raise ValueError(f"(n+1)^m = {(n + 1) ** m} allocations exceeds oracle cap {cap}")
    weights, lam = _params_arrays(params, profile.size)
    bundles = _assignments(n, m)
    # same summation order as the DP: bidder 0 first
    total = weights[0] * profile.values[0, bundles[:, 0]] + lam[0, bundles[:, 0]]
    for i in range(1, n):
        total = total + (weights[i] * profile.values[i, bundles[:, i]] + lam[i, bundles[:, i]])
    best = total.max()
    tied = np.flatnonzero(total == best)
    union = np.bitwise_or.reduce(bundles[tied], axis=1)
    # lexsort: last key is primary -> union, then A_{n-1}, ..., A_1
    keys = [bundles[tied, i] for i in range(1, n)] + [union]
    pick = tied[np.lexsort(keys)[0]]
    return Allocation(tuple(bundles[pick])), float(best)


def count_allocations(size: AuctionSize) -> int:
    return (size.n_bidders + 1) ** size.n_items


def random_allocation(size: AuctionSize, rng: np.random.Generator) -> Allocation:
    owners = rng.integers(-1, size.n_bidders, size=size.n_items)
    return Allocation(tuple(sum(1 << j for j in range(size.n_items) if owners[j] == i)
                            for i in range(size.n_bidders)))


def allocations_to_array(allocs: Sequence[Allocation]) -> np.ndarray:
    return np.array([a.bundles for a in allocs], dtype=np.int64)
