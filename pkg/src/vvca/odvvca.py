"""Gradient-based design of VVCA parameters.

Revenue splits into ``F`` (continuous, piecewise linear in ``(w, lambda)``)
and ``Z`` (welfare of the winning allocation, piecewise constant). ``F`` is
differentiated exactly with the argmax allocations held fixed. ``Z`` is
replaced by its Gaussian smoothing

    Z~(alpha, lam) = E[Z(alpha + sigma*eps, lam + sigma*delta)]

whose gradient is estimated from ``n_r`` random directions, each costing one
extra batched DP sweep::

    g = 1/n_r * sum_k (Z(alpha + sigma*eps_k, lam + sigma*delta_k) - Z(alpha, lam)) / sigma * (eps_k, delta_k)

OD-VVCA ascends ``grad F + g``; the FO-VVCA ablation ascends ``grad F`` only.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .domain import AuctionSize, ValuationBatch, check_setting, iter_batch_chunks, sample_batch
from .mechanism import BatchOutcome, RevenueBreakdown, VvcaParams, bundle_values, run_batch
from .winner import solve_arrays

log = logging.getLogger(__name__)

METHODS = ("OD_VVCA", "FO_VVCA")
CURVE_COLUMNS = ("iteration", "r_mean", "z_mean", "f_mean",
                 "grad_norm_alpha", "grad_norm_lambda", "wall_ms")

# (setting, n, m) -> (learning rate, sigma, batch size); n_r = 8, 2000 iterations
TUNED = {
    ("A", 2, 2): (0.01, 0.01, 1024),
    ("A", 2, 5): (0.001, 0.01, 2048),
    ("A", 3, 10): (0.001, 0.01, 1024),
    ("D", 2, 2): (0.01, 0.01, 1024),
    ("D", 3, 10): (0.001, 0.01, 1024),
    ("B", 5, 3): (0.001, 0.01, 1024),
    ("B", 3, 10): (0.001, 0.01, 1024),
    ("C", 2, 5): (0.001, 0.01, 2048),
    ("C", 5, 3): (0.001, 0.01, 1024),
    ("C", 3, 10): (0.001, 0.01, 1024),
    ("A", 5, 10): (0.0003, 0.001, 1024),
    ("A", 10, 5): (0.0003, 0.01, 1024),
    ("D", 5, 10): (0.0003, 0.01, 1024),
    ("D", 10, 5): (0.0003, 0.01, 1024),
    ("B", 5, 10): (0.005, 0.01, 1024),
    ("B", 10, 5): (0.005, 0.01, 1024),
    ("B", 30, 5): (0.005, 0.01, 1024),
    ("C", 5, 10): (0.005, 0.01, 1024),
    ("C", 10, 5): (0.005, 0.01, 1024),
    ("C", 30, 5): (0.005, 0.01, 1024),
}
FALLBACK = (0.001, 0.01, 1024)
DEFAULT_N_R = 8
DEFAULT_ITERATIONS = 2000
DEFAULT_EVAL_SIZE = 2 ** 16
DEFAULT_CURVE_SIZE = 4096


def tuned_defaults(setting: str, size: AuctionSize) -> tuple[float, float, int, bool]:
    """``(lr, sigma, batch_size, is_fallback)`` for a setting and size."""
    key = (check_setting(setting), size.n_bidders, size.n_items)
    if key in TUNED:
        return TUNED[key] + (False,)
    return FALLBACK + (True,)


@dataclass
class SmoothingConfig:
    sigma: float = 0.01
    n_r: int = DEFAULT_N_R
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if int(self.n_r) < 1:
            raise ValueError(f"n_r must be >= 1, got {self.n_r}")


@dataclass
class GradientEstimate:
    d_alpha: np.ndarray
    d_lambda: np.ndarray

    def __add__(self, other: "GradientEstimate") -> "GradientEstimate":
        return GradientEstimate(self.d_alpha + other.d_alpha, self.d_lambda + other.d_lambda)

    def scaled(self, c: float) -> "GradientEstimate":
        return GradientEstimate(self.d_alpha * c, self.d_lambda * c)

    @property
    def norm_alpha(self) -> float:
        return float(np.linalg.norm(self.d_alpha))

    @property
    def norm_lambda(self) -> float:
        return float(np.linalg.norm(self.d_lambda))

    @property
    def norm(self) -> float:
        return math.hypot(self.norm_alpha, self.norm_lambda)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.d_alpha)) and np.all(np.isfinite(self.d_lambda)))


@dataclass
class TrainConfig:
    method: str = "OD_VVCA"
    learning_rate: float = 0.01
    iterations: int = DEFAULT_ITERATIONS
    batch_size: int = 1024
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    eval_size: int = DEFAULT_EVAL_SIZE
    seed: int = 0
    eval_every: int = 10
    optimizer: str = "adam"
    max_grad_norm: Optional[float] = None
    adam_betas: tuple = (0.9, 0.999)
    curve_size: int = DEFAULT_CURVE_SIZE

    def __post_init__(self):
        self.method = self.method.upper()
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        for name in ("iterations", "batch_size", "eval_size", "eval_every", "curve_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")

    @classmethod
    def defaults(cls, setting: str, size: AuctionSize, **overrides) -> "TrainConfig":
        lr, sigma, batch, _ = tuned_defaults(setting, size)
        seed = overrides.get("seed", 0)
        base = cls(learning_rate=lr, batch_size=batch,
                   smoothing=SmoothingConfig(sigma=sigma, n_r=DEFAULT_N_R, seed=seed))
        return replace(base, **overrides)


@dataclass
class TrainReport:
    curve: list = field(default_factory=list)
    final: Optional[RevenueBreakdown] = None
    config: Optional[TrainConfig] = None

    def write_csv(self, path, include_time: bool = True):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_COLUMNS)
            for row in self.curve:
                writer.writerow([row["iteration"]]
                                + [repr(float(row[c])) for c in CURVE_COLUMNS[1:-1]]
                                + [f"{row['wall_ms']:.1f}" if include_time else "0"])


# --------------------------------------------------------------------------
# gradients

def grad_F_from_outcome(values: np.ndarray, params: VvcaParams, out: BatchOutcome
                        ) -> GradientEstimate:
    """Batch-mean gradient of ``F`` with all ``n + 1`` argmaxes held fixed."""
    n_prof, n, k = values.shape
    w = params.weights
    inv_w = 1.0 / w
    won = bundle_values(values, out.alloc)                    # v_k(A*_k)
    removed_won = np.stack([bundle_values(values, out.removed_alloc[:, i])
                            for i in range(n)], axis=1)       # [p, i, k] = v_k(A^{-i}_k)
    # sum over i != k of v_k(A^{-i}_k) / w_i
    cross = np.einsum("pik,i->pk", removed_won, inv_w) - removed_won[:, np.arange(n),
                                                                     np.arange(n)] * inv_w
    d_w = (-out.removed_maw * inv_w ** 2 + cross
           + out.maw_star[:, None] * inv_w ** 2 - won * inv_w.sum())
    d_alpha = (d_w * w).mean(axis=0)

    d_lambda = np.zeros((n, k))
    for bidder in range(n):
        for i in range(n):
            d_lambda[bidder] += inv_w[i] * np.bincount(out.removed_alloc[:, i, bidder],
                                                       minlength=k)
        d_lambda[bidder] -= inv_w.sum() * np.bincount(out.alloc[:, bidder], minlength=k)
    return GradientEstimate(d_alpha, d_lambda / n_prof)


def _values(batch) -> np.ndarray:
    return batch.values if isinstance(batch, ValuationBatch) else np.asarray(batch)


def grad_F(batch, params: VvcaParams) -> GradientEstimate:
    values = _values(batch)
    if len(values) == 0:
        raise ValueError("empty batch")
    return grad_F_from_outcome(values, params, run_batch(values, params))


def welfare_mean(values: np.ndarray, weights: np.ndarray, lam: np.ndarray) -> float:
    """``Z`` averaged over the batch: one DP sweep."""
    alloc, _, _ = solve_arrays(values, weights, lam)
    return float(bundle_values(values, alloc).sum(axis=1).mean())


def draw_directions(rng: np.random.Generator, n_r: int, size: AuctionSize):
    eps = rng.standard_normal((n_r, size.n_bidders))
    delta = rng.standard_normal((n_r, size.n_bidders, size.n_bundles))
    return eps, delta


def z_direction_samples(batch, params: VvcaParams, smoothing: SmoothingConfig,
                        rng: np.random.Generator, *, baseline: Optional[float] = None,
                        subtract_baseline: bool = True):
    """Per-direction terms of the smoothed-``Z`` gradient estimator.

    Returns ``(alpha_terms (n_r, n), lambda_terms (n_r, n, 2**m), dz (n_r,))``;
    the estimator is the mean over the first axis.
    """
    values = _values(batch)
    sigma = smoothing.sigma
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    eps, delta = draw_directions(rng, smoothing.n_r, params.size)
    if not subtract_baseline:
        base = 0.0
    elif baseline is None:
        base = welfare_mean(values, params.weights, params.lam)
    else:
        base = baseline
    dz = np.empty(smoothing.n_r)
    for r in range(smoothing.n_r):
        z = welfare_mean(values, np.exp(params.alpha + sigma * eps[r]),
                         params.lam + sigma * delta[r])
        dz[r] = (z - base) / sigma
    return dz[:, None] * eps, dz[:, None, None] * delta, dz


def estimate_grad_Z(batch, params: VvcaParams, smoothing: SmoothingConfig,
                    rng: np.random.Generator, *, baseline: Optional[float] = None
                    ) -> GradientEstimate:
    a, l, _ = z_direction_samples(batch, params, smoothing, rng, baseline=baseline)
    return GradientEstimate(a.mean(axis=0), l.mean(axis=0))


def smoothed_z(values: np.ndarray, params: VvcaParams, sigma: float, eps: np.ndarray,
               delta: np.ndarray) -> np.ndarray:
    """``Z`` at each perturbation ``(alpha + sigma*eps_k, lam + sigma*delta_k)``."""
    return np.array([welfare_mean(values, np.exp(params.alpha + sigma * e), params.lam + sigma * d)
                     for e, d in zip(eps, delta)])


# --------------------------------------------------------------------------
# evaluation

@dataclass
class EvaluationSummary:
    r_mean: float
    z_mean: float
    f_mean: float
    payment_means: np.ndarray
    count: int
    r_stderr: float = 0.0

    @property
    def breakdown(self) -> RevenueBreakdown:
        return RevenueBreakdown(self.r_mean, self.z_mean, self.f_mean)

    @property
    def payment_shares(self) -> np.ndarray:
        return self.payment_means / self.r_mean if self.r_mean else np.zeros_like(self.payment_means)


class _Accumulator:
    def __init__(self, n):
        self.count = 0
        self.r = self.z = self.f = self.r2 = 0.0
        self.pay = np.zeros(n)

    def add(self, out: BatchOutcome):
        rev = out.revenue
        self.count += len(rev)
        self.r += float(rev.sum())
        self.r2 += float((rev ** 2).sum())
        self.z += float(out.z.sum())
        self.f += float(out.f.sum())
        self.pay += out.payments.sum(axis=0)

    def summary(self) -> EvaluationSummary:
        c = self.count
        r_mean = self.r / c
        var = max(self.r2 / c - r_mean ** 2, 0.0) * c / max(c - 1, 1)
        return EvaluationSummary(r_mean, self.z / c, self.f / c, self.pay / c, c,
                                 math.sqrt(var / c))


def evaluate(params: VvcaParams, batch) -> EvaluationSummary:
    values = _values(batch)
    acc = _Accumulator(values.shape[1])
    for start in range(0, len(values), 65536):
        acc.add(run_batch(values[start:start + 65536], params))
    return acc.summary()


def evaluate_stream(params: VvcaParams, setting: str, size: AuctionSize, count: int,
                    seed: int, chunk_size: int = 16384) -> EvaluationSummary:
    """Evaluate on ``sample_batch(setting, size, count, seed)`` without holding it in memory."""
    acc = _Accumulator(size.n_bidders)
    for values in iter_batch_chunks(setting, size, count, seed, chunk_size=chunk_size):
        acc.add(run_batch(values, params))
    return acc.summary()


# --------------------------------------------------------------------------
# training

def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed)] + [int(k) for k in keys])
               .generate_state(1, np.uint64)[0])


class _Stepper:
    """Plain gradient ascent, or Adam when configured."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.t = 0
        self.m = self.v = None

    def __call__(self, grad_vec: np.ndarray) -> np.ndarray:
        cfg = self.config
        if cfg.optimizer == "sgd":
            return cfg.learning_rate * grad_vec
        b1, b2 = cfg.adam_betas
        if self.m is None:
            self.m = np.zeros_like(grad_vec)
            self.v = np.zeros_like(grad_vec)
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad_vec
        self.v = b2 * self.v + (1 - b2) * grad_vec ** 2
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        return cfg.learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)


def clip(grad: GradientEstimate, max_norm: Optional[float]) -> GradientEstimate:
    if max_norm is None:
        return grad
    norm = grad.norm
    return grad.scaled(max_norm / norm) if norm > max_norm else grad


GradientFn = Callable[[np.ndarray, VvcaParams, BatchOutcome, np.random.Generator],
                      GradientEstimate]
UpdateFn = Callable[[VvcaParams, GradientEstimate, "_Stepper"], VvcaParams]


def ascend(setting: str, size: AuctionSize, config: TrainConfig, gradient: GradientFn,
           update: Optional[UpdateFn] = None, *, callback=None) -> tuple[VvcaParams, TrainReport]:
    """Shared training loop: fresh batch per iteration, held-out curve.

    ``gradient`` receives the batch values, the current parameters, the batch
    outcome (``n + 1`` sweeps already done) and the direction generator.
    """
    setting = check_setting(setting)
    params = VvcaParams.zeros(size)
    stepper = _Stepper(config)
    # the curve tracks a fixed held-out batch; final numbers come from eval_size
    eval_values = sample_batch(setting, size, min(config.curve_size, config.eval_size),
                               derive_seed(config.seed, 2)).values
    directions = np.random.default_rng(derive_seed(config.seed, 3, config.smoothing.seed))
    report = TrainReport(config=config)
    start = time.perf_counter()
    last = GradientEstimate(np.zeros(size.n_bidders), np.zeros((size.n_bidders, size.n_bundles)))

    def record(iteration):
        ev = evaluate(params, eval_values)
        report.curve.append({
            "iteration": iteration, "r_mean": ev.r_mean, "z_mean": ev.z_mean,
            "f_mean": ev.f_mean, "grad_norm_alpha": last.norm_alpha,
            "grad_norm_lambda": last.norm_lambda,
            "wall_ms": (time.perf_counter() - start) * 1000.0,
        })
        log.debug("iter %d revenue %.4f", iteration, ev.r_mean)
        return ev

    record(0)
    for it in range(1, config.iterations + 1):
        values = sample_batch(setting, size, config.batch_size,
                              derive_seed(config.seed, 1, it)).values
        out = run_batch(values, params)
        grad = clip(gradient(values, params, out, directions), config.max_grad_norm)
        if not grad.is_finite():
            raise FloatingPointError(f"non-finite gradient at iteration {it}")
        last = grad
        if update is None:
            params = default_update(params, grad, stepper)
        else:
            params = update(params, grad, stepper)
        if callback is not None:
            callback(it, params)
        if it % config.eval_every == 0 or it == config.iterations:
            ev = record(it)
    report.final = ev.breakdown
    return params, report


def default_update(params: VvcaParams, grad: GradientEstimate, stepper: _Stepper) -> VvcaParams:
    vec = np.concatenate([grad.d_alpha, grad.d_lambda.ravel()])
    step = stepper(vec)
    n = params.size.n_bidders
    return VvcaParams(params.size, params.alpha + step[:n],
                      params.lam + step[n:].reshape(params.lam.shape))


def train(setting: str, size: AuctionSize, config: TrainConfig, *, callback=None
          ) -> tuple[VvcaParams, TrainReport]:
    """Train from VCG (``alpha = 0, lam = 0``) with OD-VVCA or FO-VVCA."""
    if config.method not in METHODS:
        raise ValueError(f"train() handles {METHODS}, got {config.method!r}")
    smoothing = config.smoothing

    def gradient(values, params, out, rng):
        g = grad_F_from_outcome(values, params, out)
        if config.method == "OD_VVCA":
            g = g + estimate_grad_Z(values, params, smoothing, rng, baseline=float(out.z.mean()))
        return g

    return ascend(setting, size, config, gradient, callback=callback)


def config_to_dict(config: TrainConfig) -> dict:
    out = asdict(config)
    out["adam_betas"] = list(config.adam_betas)
    return out
