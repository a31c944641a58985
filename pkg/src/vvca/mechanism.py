"""VVCA evaluation: allocation, payments and the revenue split ``R = Z + F``.

For a profile ``V`` with winning allocation ``A*`` (affine welfare ``W*``) and
``M_i``, the best affine welfare once bidder ``i``'s valuations are zeroed
(its boosts stay in play), bidder ``i`` pays::

    p_i = (M_i - W*) / w_i + v_i(A*_i)

Summing over bidders splits revenue into the welfare of the winning
allocation, ``Z = sum_i v_i(A*_i)``, and ``F = sum_i (M_i - W*) / w_i``.
Evaluating one profile therefore takes ``n + 1`` DP solves.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .domain import AuctionSize, ValuationBatch, ValuationProfile
from .winner import Allocation, solve_arrays


@dataclass
class VvcaParams:
    """Log-weights ``alpha`` (``w = exp(alpha)``) and boosts ``lam[i, mask]``."""

    size: AuctionSize
    alpha: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=np.float64).reshape(-1)
        self.lam = np.array(self.lam, dtype=np.float64)
        if self.alpha.shape != (self.size.n_bidders,):
            raise ValueError(f"alpha must have {self.size.n_bidders} entries")
        if self.lam.shape != (self.size.n_bidders, self.size.n_bundles):
            raise ValueError(
                f"lambda must have shape {(self.size.n_bidders, self.size.n_bundles)}")
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.lam))):
            raise ValueError("parameters must be finite")

    @classmethod
    def zeros(cls, size: AuctionSize) -> "VvcaParams":
        return cls(size, np.zeros(size.n_bidders), np.zeros((size.n_bidders, size.n_bundles)))

    @classmethod
    def from_weights(cls, size: AuctionSize, weights, lam) -> "VvcaParams":
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        return cls(size, np.log(weights), lam)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.alpha)

    def copy(self) -> "VvcaParams":
        return VvcaParams(self.size, self.alpha.copy(), self.lam.copy())

    def scaled(self, c: float) -> "VvcaParams":
        """Same mechanism with ``(w, lam)`` multiplied by ``c > 0``."""
        if c <= 0:
            raise ValueError("scale must be positive")
        return VvcaParams(self.size, self.alpha + math.log(c), self.lam * c)

    def to_dict(self, setting_id: str = "", created_from_seed: Optional[int] = None) -> dict:
        # Python's float repr round-trips exactly through json
        return {
            "n": self.size.n_bidders,
            "m": self.size.n_items,
            "alpha": [float(a) for a in self.alpha],
            "lambda": [[float(x) for x in row] for row in self.lam],
            "setting_id": setting_id,
            "created_from_seed": created_from_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VvcaParams":
        return cls(AuctionSize(int(data["n"]), int(data["m"])),
                   np.array(data["alpha"], dtype=np.float64),
                   np.array(data["lambda"], dtype=np.float64))

    def save(self, path, setting_id: str = "", created_from_seed: Optional[int] = None):
        Path(path).write_text(json.dumps(self.to_dict(setting_id, created_from_seed), indent=1))

    @classmethod
    def load(cls, path) -> "VvcaParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AuctionOutcome:
    allocation: Allocation
    payments: np.ndarray
    revenue: float
    welfare_z: float
    continuous_f: float


@dataclass
class RevenueBreakdown:
    r_mean: float
    z_mean: float
    f_mean: float


@dataclass
class BatchOutcome:
    """Arrays describing every auction in a batch.

    ``removed_alloc[p, i]`` is the argmax allocation with bidder ``i`` zeroed
    and ``removed_maw[p, i]`` its affine welfare ``M_i``.
    """

    alloc: np.ndarray          # (P, n)
    maw_star: np.ndarray       # (P,)
    removed_alloc: np.ndarray  # (P, n, n)
    removed_maw: np.ndarray    # (P, n)
    payments: np.ndarray       # (P, n)
    z: np.ndarray              # (P,)
    f: np.ndarray              # (P,)

    @property
    def revenue(self) -> np.ndarray:
        return self.payments.sum(axis=1)


def bundle_values(values: np.ndarray, alloc: np.ndarray) -> np.ndarray:
    """``values[p, i, alloc[p, i]]`` for ``(P, n, K)`` values and ``(P, n)`` masks."""
    return np.take_along_axis(values, alloc[:, :, None], axis=2)[:, :, 0]


def _check_params(params: VvcaParams, n: int, k: int):
    if params.lam.shape != (n, k):
        raise ValueError(f"parameters for a {params.size} auction do not fit "
                         f"{n} bidders and {k} bundles")


def run_batch(values: np.ndarray, params: VvcaParams, *, parallel: bool = True) -> BatchOutcome:
    """Evaluate the VVCA on every profile of a ``(P, n, 2**m)`` array."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    n_prof, n, k = values.shape
    _check_params(params, n, k)
    if np.any(values < 0):
        raise ValueError("valuations must be non-negative")
    w, lam = params.weights, params.lam
    alloc, maw_star, _ = solve_arrays(values, w, lam, parallel=parallel)
    removed_alloc = np.empty((n_prof, n, n), dtype=np.int64)
    removed_maw = np.empty((n_prof, n))
    for i in range(n):
        removed_alloc[:, i], removed_maw[:, i], _ = solve_arrays(values, w, lam, i,
                                                                 parallel=parallel)
    won = bundle_values(values, alloc)
    payments = (removed_maw - maw_star[:, None]) / w[None, :] + won
    z = won.sum(axis=1)
    f = ((removed_maw - maw_star[:, None]) / w[None, :]).sum(axis=1)
    return BatchOutcome(alloc, maw_star, removed_alloc, removed_maw, payments, z, f)


def zero_bidder(profile: ValuationProfile, i: int) -> ValuationProfile:
    n = profile.size.n_bidders
    if not 0 <= i < n:
        raise IndexError(f"bidder {i} out of range for {n} bidders")
    values = profile.values.copy()
    values[i] = 0.0
    return ValuationProfile(profile.size, values, additive=profile.additive)


def run_auction(profile: ValuationProfile, params: VvcaParams) -> AuctionOutcome:
    if params.size.n_bidders != profile.size.n_bidders or \
            params.size.n_items != profile.size.n_items:
        raise ValueError(f"parameters for {params.size} applied to a {profile.size} profile")
    out = run_batch(profile.values[None], params)
    return AuctionOutcome(
        allocation=Allocation(tuple(out.alloc[0])),
        payments=out.payments[0],
        revenue=float(out.payments[0].sum()),
        welfare_z=float(out.z[0]),
        continuous_f=float(out.f[0]),
    )


def revenue_breakdown_batch(batch: ValuationBatch, params: VvcaParams) -> RevenueBreakdown:
    if len(batch) == 0:
        raise ValueError("empty batch")
    out = run_batch(batch.values, params)
    return RevenueBreakdown(float(np.mean(out.revenue)), float(np.mean(out.z)),
                            float(np.mean(out.f)))


def utility_batch(true_values: np.ndarray, reported_values: np.ndarray,
                  params: VvcaParams, i: int) -> np.ndarray:
    """Utility of bidder ``i`` (true values) when the auction sees the reports."""
    true_values = np.asarray(true_values, dtype=np.float64)
    reported_values = np.asarray(reported_values, dtype=np.float64)
    if true_values.shape != reported_values.shape:
        raise ValueError("true and reported profiles differ in shape")
    out = run_batch(reported_values, params)
    won = np.take_along_axis(true_values[:, i, :], out.alloc[:, i:i + 1], axis=1)[:, 0]
    return won - out.payments[:, i]


def utility(true_profile: ValuationProfile, reported_profile: ValuationProfile,
            params: VvcaParams, i: int) -> float:
    if true_profile.size != reported_profile.size:
        raise ValueError("true and reported profiles differ in auction size")
    return float(utility_batch(true_profile.values[None], reported_profile.values[None],
                               params, i)[0])
