"""Reference mechanisms: VCG, per-item Myerson, and BBBVVCA training."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import isotonic_regression

from .domain import ADDITIVE_SETTINGS, AuctionSize, ValuationBatch, check_setting
from .mechanism import VvcaParams
from .odvvca import TrainConfig, TrainReport, ascend, grad_F_from_outcome

MIN_WEIGHT = 1e-3


def vcg_params(size: AuctionSize) -> VvcaParams:
    return VvcaParams.zeros(size)


# --------------------------------------------------------------------------
# Item-Myerson

@dataclass
class VirtualValueTable:
    """Ironed virtual values of one bidder's per-item value distribution.

    Closed-form tables (uniform ``U[0, upper]``) evaluate ``phi(v) = 2v - upper``
    exactly; grid tables interpolate linearly and extend with slope 1 past
    the grid ends so ``phi`` stays strictly increasing outside the grid.
    """

    bidder: int
    values: np.ndarray
    phi: np.ndarray
    reserve: float
    upper: Optional[float] = None

    @property
    def grid(self) -> list:
        return list(zip(self.values.tolist(), self.phi.tolist()))

    def virtual_value(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.upper is not None:
            return 2.0 * v - self.upper
        lo, hi = self.values[0], self.values[-1]
        out = np.interp(v, self.values, self.phi)
        out = np.where(v > hi, self.phi[-1] + (v - hi), out)
        return np.where(v < lo, self.phi[0] - (lo - v), out)

    def inverse(self, z):
        """Smallest value whose ironed virtual value reaches ``z``."""
        z = np.asarray(z, dtype=np.float64)
        if self.upper is not None:
            return (z + self.upper) / 2.0
        vals, phi = self.values, self.phi
        idx = np.searchsorted(phi, z, side="left")
        inner = np.clip(idx, 1, len(phi) - 1)
        p0, p1 = phi[inner - 1], phi[inner]
        v0, v1 = vals[inner - 1], vals[inner]
        span = np.where(p1 > p0, p1 - p0, 1.0)
        t = np.clip((z - p0) / span, 0.0, 1.0)
        out = np.where(p1 > p0, v0 + t * (v1 - v0), v1)
        out = np.where(z <= phi[0], vals[0] - (phi[0] - z), out)
        return np.where(z > phi[-1], vals[-1] + (z - phi[-1]), out)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["value", "ironed_virtual_value"])
            for v, p in zip(self.values, self.phi):
                writer.writerow([repr(float(v)), repr(float(p))])


def iron(phi: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Pool-adjacent-violators projection onto non-decreasing sequences."""
    return isotonic_regression(phi, weights=weights, increasing=True).x


def build_virtual_value(setting: str, bidder: int, grid_size: int = 10_000) -> VirtualValueTable:
    """Virtual value table for 0-based ``bidder`` under an additive setting."""
    setting = check_setting(setting)
    if setting not in ADDITIVE_SETTINGS:
        raise ValueError("Item-Myerson needs additive valuations (settings A, B, C)")
    q = (np.arange(grid_size) + 0.5) / grid_size
    if setting in ("A", "B"):
        upper = 1.0 if setting == "A" else float(bidder + 1)
        values = q * upper
        return VirtualValueTable(bidder, values, 2.0 * values - upper, upper / 2.0, upper)
    dist = stats.lognorm(s=1.0 / (bidder + 1))
    values = dist.ppf(q)
    phi = iron(values - dist.sf(values) / dist.pdf(values))
    table = VirtualValueTable(bidder, values, phi, 0.0)
    table.reserve = float(table.inverse(0.0))
    return table


def _myerson_items(item_values: np.ndarray, tables: Sequence[VirtualValueTable]):
    """Winners ``(..., m)`` (-1 for unsold) and payments for ``(..., n, m)`` values."""
    n = item_values.shape[-2]
    phi = np.stack([tables[i].virtual_value(item_values[..., i, :]) for i in range(n)], axis=-2)
    best = phi.max(axis=-2)
    winner = phi.argmax(axis=-2)   # lowest index on ties
    if n > 1:
        masked = np.where(np.arange(n)[:, None] == winner[..., None, :], -np.inf, phi)
        second = masked.max(axis=-2)
    else:
        second = np.full(best.shape, -np.inf)
    threshold = np.maximum(second, 0.0)
    pay = np.zeros(best.shape)
    for i in range(n):
        pay = np.where(winner == i, tables[i].inverse(threshold), pay)
    sold = best >= 0.0
    return np.where(sold, winner, -1), np.where(sold, pay, 0.0)


def item_myerson_outcome(item_values, tables: Sequence[VirtualValueTable]
                         ) -> tuple[Optional[int], float]:
    """Outcome of one item given each bidder's value for it."""
    item_values = np.asarray(item_values, dtype=np.float64)
    winner, pay = _myerson_items(item_values[:, None], tables)
    w = int(winner[0])
    return (None if w < 0 else w), float(pay[0])


def myerson_tables(setting: str, n_bidders: int, grid_size: int = 10_000):
    return [build_virtual_value(setting, i, grid_size) for i in range(n_bidders)]


def item_myerson_revenues(item_values: np.ndarray, tables) -> np.ndarray:
    """Per-profile revenue for item values shaped ``(P, n, m)``."""
    _, pay = _myerson_items(np.asarray(item_values, dtype=np.float64), tables)
    return pay.sum(axis=-1)


def item_myerson_revenue(batch: ValuationBatch, tables=None, grid_size: int = 10_000) -> float:
    if not batch.additive or batch.setting_id not in ADDITIVE_SETTINGS:
        raise ValueError("Item-Myerson is only defined for additive batches (A, B, C)")
    if tables is None:
        tables = myerson_tables(batch.setting_id, batch.size.n_bidders, grid_size)
    return float(item_myerson_revenues(batch.item_values(), tables).mean())


# --------------------------------------------------------------------------
# BBBVVCA

BBBVVCA_ITERATIONS = 4000


def bbbvvca_gradient(values, params: VvcaParams, out):
    """Frozen-allocation revenue gradient in ``(w, lambda)`` coordinates.

    With every argmax fixed, ``Z`` is constant and the revenue gradient is
    the gradient of ``F``; returned as ``(d_w, d_lambda)``.
    """
    g = grad_F_from_outcome(values, params, out)
    return g.d_alpha / params.weights, g.d_lambda


def bbbvvca_train(setting: str, size: AuctionSize, config: TrainConfig, *, callback=None
                  ) -> tuple[VvcaParams, TrainReport]:
    """Gradient ascent on ``(w, lambda)`` with ``w`` projected to ``>= 1e-3``."""
    from .odvvca import GradientEstimate

    def gradient(values, params, out, rng):
        d_w, d_lambda = bbbvvca_gradient(values, params, out)
        return GradientEstimate(d_w, d_lambda)

    def update(params, grad, stepper):
        vec = np.concatenate([grad.d_alpha, grad.d_lambda.ravel()])
        step = stepper(vec)
        n = size.n_bidders
        w = np.maximum(params.weights + step[:n], MIN_WEIGHT)
        return VvcaParams(size, np.log(w), params.lam + step[n:].reshape(params.lam.shape))

    return ascend(setting, size, config, gradient, update, callback=callback)
