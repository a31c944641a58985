"""Experiment orchestration, case-study surfaces and the verification suite."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import baselines, odvvca
from .domain import (ADDITIVE_SETTINGS, AuctionSize, ValuationBatch, ValuationProfile,
                     check_setting, iter_batch_chunks, sample_batch)
from .mechanism import VvcaParams, run_batch
from .odvvca import (EvaluationSummary, TrainConfig, derive_seed,
                     evaluate_stream, smoothed_z, welfare_mean)
from .winner import (brute_force_winner, dp_operation_count, dp_tables, solve_arrays)

log = logging.getLogger(__name__)

METHODS = ("OD_VVCA", "FO_VVCA", "BBBVVCA", "VCG", "ITEM_MYERSON")
TRAINED = ("OD_VVCA", "FO_VVCA", "BBBVVCA")
REPORT_COLUMNS = ("run", "seed", "r_mean", "z_mean", "f_mean", "r_stderr", "count")


@dataclass
class ExperimentConfig:
    setting_id: str
    size: AuctionSize
    method: str = "OD_VVCA"
    train: Optional[TrainConfig] = None
    runs: int = 5
    output_dir: Optional[Path] = None
    name: Optional[str] = None
    timings: bool = True

    def __post_init__(self):
        self.setting_id = check_setting(self.setting_id)
        self.method = self.method.upper()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.method == "ITEM_MYERSON" and self.setting_id not in ADDITIVE_SETTINGS:
            raise ValueError("Item-Myerson is not DSIC for non-additive setting D")
        if self.train is None:
            self.train = TrainConfig.defaults(self.setting_id, self.size)
        if self.method in odvvca.METHODS:
            self.train = replace(self.train, method=self.method)
        if self.output_dir is not None:
            self.output_dir = Path(self.output_dir)

    @property
    def experiment_name(self) -> str:
        return self.name or f"{self.method.lower()}_{self.size}{self.setting_id}"


@dataclass
class ExperimentReport:
    revenues: list
    seeds: list
    summaries: list
    curves: list = field(default_factory=list)
    config: Optional[ExperimentConfig] = None
    params: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.revenues)

    @property
    def std(self) -> float:
        return statistics.stdev(self.revenues) if len(self.revenues) > 1 else 0.0


def _write_report(path: Path, rows: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row["run"], row["seed"]]
                            + [repr(float(row[c])) for c in REPORT_COLUMNS[2:6]]
                            + [row["count"]])


def _evaluate_method(config: ExperimentConfig, params: Optional[VvcaParams], seed: int
                     ) -> EvaluationSummary:
    cfg = config.train
    eval_seed = derive_seed(seed, 4)
    if config.method == "ITEM_MYERSON":
        tables = baselines.myerson_tables(config.setting_id, config.size.n_bidders)
        revs = np.concatenate([
            baselines.item_myerson_revenues(
                ValuationBatch(v, config.setting_id, eval_seed, additive=True).item_values(),
                tables)
            for v in iter_batch_chunks(config.setting_id, config.size, cfg.eval_size, eval_seed,
                                       chunk_size=16384)])
        r = float(revs.mean())
        se = float(revs.std(ddof=1) / math.sqrt(len(revs))) if len(revs) > 1 else 0.0
        # Z/F split is a VVCA notion; Item-Myerson reports revenue only
        return EvaluationSummary(r, float("nan"), float("nan"),
                                 np.full(config.size.n_bidders, float("nan")), len(revs), se)
    return evaluate_stream(params, config.setting_id, config.size, cfg.eval_size, eval_seed)


def run_experiment(config: ExperimentConfig, *, callback=None) -> ExperimentReport:
    """Run ``config.runs`` seeded repetitions; write per-run and summary files."""
    cfg = config.train
    root = None
    if config.output_dir is not None:
        root = config.output_dir / config.experiment_name
        root.mkdir(parents=True, exist_ok=True)
    revenues, seeds, summaries, curves, all_params = [], [], [], [], []
    rows = []
    for k in range(config.runs):
        seed = cfg.seed + k
        run_cfg = replace(cfg, seed=seed, smoothing=replace(cfg.smoothing, seed=seed))
        params, report = None, None
        if config.method in odvvca.METHODS:
            params, report = odvvca.train(config.setting_id, config.size, run_cfg,
                                          callback=callback)
        elif config.method == "BBBVVCA":
            params, report = baselines.bbbvvca_train(config.setting_id, config.size, run_cfg,
                                                     callback=callback)
        elif config.method == "VCG":
            params = baselines.vcg_params(config.size)
        summary = _evaluate_method(config, params, seed)
        log.info("%s run %d: revenue %.4f", config.experiment_name, k, summary.r_mean)
        row = {"run": k, "seed": seed, "r_mean": summary.r_mean, "z_mean": summary.z_mean,
               "f_mean": summary.f_mean, "r_stderr": summary.r_stderr, "count": summary.count}
        rows.append(row)
        revenues.append(summary.r_mean)
        seeds.append(seed)
        summaries.append(summary)
        curves.append(report.curve if report else [])
        all_params.append(params)
        if root is not None:
            run_dir = root / f"run_{k}"
            run_dir.mkdir(exist_ok=True)
            if params is not None:
                params.save(run_dir / "params.json", config.setting_id, seed)
            if report is not None:
                report.write_csv(run_dir / "curve.csv", include_time=config.timings)
            _write_report(run_dir / "report.csv", [row])
    out = ExperimentReport(revenues, seeds, summaries, curves, config, all_params)
    if root is not None:
        _write_report(root / "report.csv", rows)
        summary = {"experiment": config.experiment_name, "setting": config.setting_id,
                   "n": config.size.n_bidders, "m": config.size.n_items,
                   "method": config.method, "runs": config.runs, "seeds": seeds,
                   "revenues": revenues, "mean": out.mean, "std": out.std,
                   "train": odvvca.config_to_dict(cfg)}
        (root / "summary.json").write_text(json.dumps(summary, indent=1))
    return out


# --------------------------------------------------------------------------
# case studies

SURFACE_COLUMNS = ("x", "y", "R", "F", "Z")


def case_study_params(x: float, y: float) -> VvcaParams:
    """2x2 VVCA with unit weights, singleton boosts ``x`` and grand-bundle boosts ``y``."""
    row = [0.0, x, x, y]
    return VvcaParams(AuctionSize(2, 2), np.zeros(2), np.array([row, row]))


def _check_2x2(values: np.ndarray):
    if values.shape[1:] != (2, 4):
        raise ValueError("the case study needs a 2x2 auction batch")


def case_study_grid(x_range=(-1.0, 1.0), y_range=(-1.0, 1.0), grid_n: int = 81, batch=None,
                    path=None) -> list[dict]:
    """Revenue, ``F`` and ``Z`` over the ``(x, y)`` boost plane."""
    values = batch.values if isinstance(batch, ValuationBatch) else np.asarray(batch)
    _check_2x2(values)
    rows = []
    for x in np.linspace(x_range[0], x_range[1], grid_n):
        for y in np.linspace(y_range[0], y_range[1], grid_n):
            out = run_batch(values, case_study_params(float(x), float(y)))
            rows.append({"x": float(x), "y": float(y), "R": float(out.revenue.mean()),
                         "F": float(out.f.mean()), "Z": float(out.z.mean())})
    if path is not None:
        write_rows(path, SURFACE_COLUMNS, rows)
    return rows


def write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(row[c])) for c in columns])


def piecewise_constant_fraction(z: Sequence[float]) -> float:
    """Share of adjacent pairs with bit-identical values."""
    z = np.asarray(z)
    if len(z) < 2:
        return 1.0
    return float(np.mean(z[1:] == z[:-1]))


def smoothing_sweep(lambda_coordinate: tuple, value_range=(-0.5, 0.5, 101),
                    sigma_list=(0.001, 0.003, 0.01), batch=None, directions: int = 256,
                    params: Optional[VvcaParams] = None, seed: int = 0, path=None) -> list[dict]:
    """``Z`` and its Gaussian smoothings along one boost coordinate.

    The same direction draws are reused at every point of the sweep, so the
    smoothed curves are deterministic functions of the coordinate.
    """
    values = batch.values if isinstance(batch, ValuationBatch) else np.asarray(batch)
    size = AuctionSize(values.shape[1], values.shape[2].bit_length() - 1)
    bidder, mask = lambda_coordinate
    if not (0 <= bidder < size.n_bidders and 0 <= mask < size.n_bundles):
        raise ValueError(f"invalid boost coordinate {lambda_coordinate} for a {size} auction")
    base = params.copy() if params is not None else VvcaParams.zeros(size)
    rng = np.random.default_rng(seed)
    eps, delta = odvvca.draw_directions(rng, directions, size)
    lo, hi, points = value_range
    rows = []
    for value in np.linspace(lo, hi, int(points)):
        p = base.copy()
        p.lam[bidder, mask] = value
        z = welfare_mean(values, p.weights, p.lam)
        row = {"lambda_value": float(value), "Z": z}
        for sigma in sigma_list:
            zs = smoothed_z(values, p, sigma, eps, delta)
            row[f"Z_smooth_{sigma:g}"] = float(zs.mean())
            row[f"grad_{sigma:g}"] = float(np.mean((zs - z) / sigma * delta[:, bidder, mask]))
        rows.append(row)
    if path is not None:
        write_rows(path, sweep_columns(sigma_list), rows)
    return rows


def sweep_columns(sigma_list) -> tuple:
    return (("lambda_value", "Z") + tuple(f"Z_smooth_{s:g}" for s in sigma_list)
            + tuple(f"grad_{s:g}" for s in sigma_list))


# --------------------------------------------------------------------------
# verification suite

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


@dataclass
class VerifyReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        return [f"{'PASS' if c.passed else 'FAIL'}  {c.name:<28} {c.detail} ({c.seconds:.1f}s)"
                for c in self.checks]


def random_params(size: AuctionSize, rng: np.random.Generator, scale: float = 1.0) -> VvcaParams:
    return VvcaParams(size, rng.uniform(-scale, scale, size.n_bidders),
                      rng.uniform(-scale, scale, (size.n_bidders, size.n_bundles)))


def _tie_rich_profile(size: AuctionSize, rng) -> tuple[ValuationProfile, VvcaParams]:
    """Half-integer values and boosts: exact ties are frequent and sums are exact."""
    items = rng.integers(0, 3, size=(size.n_bidders, size.n_items)) / 2.0
    lam = rng.integers(-2, 3, size=(size.n_bidders, size.n_bundles)) / 2.0
    return (ValuationProfile.from_item_values(items),
            VvcaParams(size, np.zeros(size.n_bidders), lam))


def check_oracle(instances: int, rng, solver=None, oracle=brute_force_winner) -> CheckResult:
    """DP vs exhaustive search on random and tie-rich instances, n, m <= 4."""
    from .winner import solve_winner
    solver = solver or solve_winner
    mismatches = 0
    worst = 0.0
    for t in range(instances):
        size = AuctionSize(int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        if t % 4 == 3:
            profile, params = _tie_rich_profile(size, rng)
        else:
            profile = sample_batch("ABCD"[t % 4], size, 1, int(rng.integers(2 ** 31)))[0]
            params = random_params(size, rng)
        a, w = solver(profile, params)
        b, w_ref = oracle(profile, params)
        rel = abs(w - w_ref) / max(1.0, abs(w_ref))
        worst = max(worst, rel)
        if a != b or rel > 1e-12:
            mismatches += 1
    return CheckResult("oracle_equivalence", mismatches == 0,
                       f"{instances} instances, {mismatches} mismatches, max rel err {worst:.1e}")


def check_op_count(max_n: int = 6, max_m: int = 10) -> CheckResult:
    bad = []
    rng = np.random.default_rng(0)
    for n in range(1, max_n + 1):
        for m in range(1, max_m + 1):
            size = AuctionSize(n, m)
            profile = sample_batch("A", size, 1, n * 100 + m)[0]
            ops = dp_tables(profile, random_params(size, rng)).op_count
            _, _, batch_ops = solve_arrays(profile.values[None], np.ones(n),
                                           np.zeros((n, size.n_bundles)))
            expected = dp_operation_count(size)
            if ops != expected or int(batch_ops[0]) != expected:
                bad.append((n, m, ops, int(batch_ops[0]), expected))
    return CheckResult("op_count", not bad, f"n<={max_n}, m<={max_m}; mismatches {bad[:3]}")


def _identity_errors(values, params, auction) -> dict:
    out = auction(values, params)
    rev = out.payments.sum(axis=1)
    scale = np.maximum(1.0, np.abs(rev))
    errs = {
        "r_vs_zf": float(np.max(np.abs(rev - (out.z + out.f)) / scale)),
        "min_payment": float(out.payments.min()),
    }
    worst = 0.0
    for c in (0.5, 2.0, 10.0):
        other = auction(values, params.scaled(c))
        worst = max(worst, float(np.max(np.abs(other.payments.sum(axis=1) - rev) / scale)),
                    float(np.max(np.abs(other.z - out.z) / np.maximum(1.0, np.abs(out.z)))))
    errs["scale"] = worst
    return errs


def check_identities(profiles: int, rng, auction=run_batch) -> CheckResult:
    worst = {"r_vs_zf": 0.0, "min_payment": 0.0, "scale": 0.0}
    for setting, (n, m) in itertools.product("ABCD", [(2, 2), (2, 3), (3, 3), (4, 2)]):
        size = AuctionSize(n, m)
        values = sample_batch(setting, size, profiles, int(rng.integers(2 ** 31))).values
        for scale in (0.0, 0.3, 1.0):
            errs = _identity_errors(values, random_params(size, rng, scale), auction)
            worst["r_vs_zf"] = max(worst["r_vs_zf"], errs["r_vs_zf"])
            worst["scale"] = max(worst["scale"], errs["scale"])
            worst["min_payment"] = min(worst["min_payment"], errs["min_payment"])
    ok = worst["r_vs_zf"] <= 1e-9 and worst["scale"] <= 1e-9 and worst["min_payment"] >= -1e-12
    return CheckResult("revenue_identities", ok,
                       "max |R-(Z+F)| {r_vs_zf:.1e}, min payment {min_payment:.1e}, "
                       "max scale drift {scale:.1e}".format(**worst))


def utilities(true_values, reported_values, params, bidder, auction=run_batch) -> np.ndarray:
    out = auction(reported_values, params)
    won = np.take_along_axis(true_values[:, bidder, :], out.alloc[:, bidder:bidder + 1],
                             axis=1)[:, 0]
    return won - out.payments[:, bidder]


def check_incentives(pairs: int, rng, auction=run_batch) -> CheckResult:
    """IR and sampled DSIC in 2x3 and 3x3 with random VVCA parameters.

    Misreports are either a full redraw of the bidder's valuation table or a
    single perturbed bundle entry.
    """
    worst_ir, worst_gain, total = 0.0, 0.0, 0
    for size in (AuctionSize(2, 3), AuctionSize(3, 3)):
        per_block = 500
        for _ in range(max(1, pairs // (2 * per_block))):
            setting = "ABCD"[int(rng.integers(4))]
            params = random_params(size, rng, 0.5)
            true = sample_batch(setting, size, per_block, int(rng.integers(2 ** 31))).values
            bidder = int(rng.integers(size.n_bidders))
            honest = utilities(true, true, params, bidder, auction)
            worst_ir = min(worst_ir, float(honest.min()))
            report = true.copy()
            redraw = sample_batch(setting, size, per_block, int(rng.integers(2 ** 31))).values
            half = per_block // 2
            report[:half, bidder] = redraw[:half, bidder]
            rows = np.arange(half, per_block)
            masks = rng.integers(1, size.n_bundles, size=len(rows))
            report[rows, bidder, masks] = np.maximum(
                0.0, report[rows, bidder, masks] + rng.normal(0.0, 0.5, size=len(rows)))
            lie = utilities(true, report, params, bidder, auction)
            worst_gain = max(worst_gain, float((lie - honest).max()))
            total += per_block
    ok = worst_ir >= -1e-9 and worst_gain <= 1e-9
    return CheckResult("incentives", ok,
                       f"{total} pairs, min truthful utility {worst_ir:.1e}, "
                       f"max misreport gain {worst_gain:.1e}")


def per_item_second_price(item_values: np.ndarray) -> np.ndarray:
    """VCG payments for additive bidders, item by item: ``(P, n, m) -> (P, n)``."""
    p, n, m = item_values.shape
    pay = np.zeros((p, n))
    if n < 2:
        return pay
    order = np.argsort(-item_values, axis=1, kind="stable")
    top = order[:, 0, :]
    second = np.take_along_axis(item_values, order[:, 1:2, :], axis=1)[:, 0, :]
    for i in range(n):
        pay[:, i] = np.where(top == i, second, 0.0).sum(axis=1)
    return pay


def check_vcg_reduction(profiles: int, rng, auction=run_batch) -> CheckResult:
    worst = 0.0
    for n, m in [(2, 2), (3, 3), (4, 2), (2, 5)]:
        size = AuctionSize(n, m)
        batch = sample_batch("A", size, profiles, int(rng.integers(2 ** 31)))
        out = auction(batch.values, VvcaParams.zeros(size))
        worst = max(worst, float(np.abs(out.payments - per_item_second_price(
            batch.item_values())).max()))
    return CheckResult("vcg_reduction", worst <= 1e-9, f"max payment gap {worst:.1e}")


def argmax_signature(values, params) -> tuple:
    out = run_batch(values, params)
    return out.alloc.tobytes() + out.removed_alloc.tobytes()


def fd_grad_F(values, params, h=1e-5):
    """Central differences of mean ``F`` in every coordinate, plus a stability mask."""
    sig = argmax_signature(values, params)
    n, k = params.lam.shape
    fd_a, fd_l = np.zeros(n), np.zeros((n, k))
    stable = True
    for idx in range(n + n * k):
        vals = []
        for sgn in (1.0, -1.0):
            p = params.copy()
            if idx < n:
                p.alpha[idx] += sgn * h
            else:
                p.lam[divmod(idx - n, k)] += sgn * h
            stable = stable and argmax_signature(values, p) == sig
            vals.append(run_batch(values, p).f.mean())
        d = (vals[0] - vals[1]) / (2 * h)
        if idx < n:
            fd_a[idx] = d
        else:
            fd_l[divmod(idx - n, k)] = d
    return fd_a, fd_l, stable


def check_grad_F(instances: int, rng) -> CheckResult:
    checked, worst = 0, 0.0
    attempts = 0
    while checked < instances and attempts < 20 * instances:
        attempts += 1
        size = AuctionSize(int(rng.integers(2, 4)), 3)
        values = sample_batch("ABCD"[attempts % 4], size, 1, int(rng.integers(2 ** 31))).values
        params = random_params(size, rng, 0.5)
        fd_a, fd_l, stable = fd_grad_F(values, params)
        if not stable:
            continue
        g = odvvca.grad_F(values, params)
        num = np.concatenate([fd_a, fd_l.ravel()])
        ana = np.concatenate([g.d_alpha, g.d_lambda.ravel()])
        worst = max(worst, float(np.max(np.abs(num - ana)) / max(1.0, np.max(np.abs(ana)))))
        checked += 1
    ok = checked >= instances and worst <= 1e-4
    return CheckResult("grad_F_finite_difference", ok,
                       f"{checked} stable instances, max rel err {worst:.1e}")


def check_batch_determinism(rng) -> CheckResult:
    size = AuctionSize(3, 5)
    values = sample_batch("D", size, 1024, int(rng.integers(2 ** 31))).values
    params = random_params(size, rng)
    a = solve_arrays(values, params.weights, params.lam, parallel=True)
    b = solve_arrays(values, params.weights, params.lam, parallel=False)
    same = all(np.array_equal(x, y) for x, y in zip(a, b))
    return CheckResult("batch_determinism", same, "parallel vs sequential kernels")


def check_myerson_dsic(rng, grid_size: int = 10_000) -> CheckResult:
    worst = 0.0
    for setting, n in (("A", 2), ("B", 3), ("C", 3)):
        tables = baselines.myerson_tables(setting, n, grid_size)
        size = AuctionSize(n, 1)
        items = sample_batch(setting, size, 2000, int(rng.integers(2 ** 31))).item_values()
        winners, pay = baselines._myerson_items(items, tables)
        bidder = int(rng.integers(n))
        honest = np.where(winners[:, 0] == bidder, items[:, bidder, 0] - pay[:, 0], 0.0)
        lie_vals = items.copy()
        lie_vals[:, bidder, 0] = items[:, bidder, 0] * rng.uniform(0.0, 2.0, len(items))
        w2, p2 = baselines._myerson_items(lie_vals, tables)
        lie = np.where(w2[:, 0] == bidder, items[:, bidder, 0] - p2[:, 0], 0.0)
        worst = max(worst, float((lie - honest).max()))
    return CheckResult("item_myerson_dsic", worst <= 1e-3, f"max misreport gain {worst:.1e}")


SCALES = {
    "quick": dict(oracle=300, identity_profiles=64, pairs=2000, vcg_profiles=256, grad=20,
                  op_n=6, op_m=8),
    "full": dict(oracle=4000, identity_profiles=512, pairs=20000, vcg_profiles=4096, grad=100,
                 op_n=6, op_m=10),
}


def verify_suite(scale: str = "quick", *, seed: int = 0, auction: Callable = run_batch,
                 solver=None, printer: Optional[Callable[[str], None]] = None) -> VerifyReport:
    """Cross-module property checks; ``auction``/``solver`` are injectable."""
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {tuple(SCALES)}")
    s = SCALES[scale]
    rng = np.random.default_rng(seed)
    jobs = [
        lambda: check_oracle(s["oracle"], rng, solver=solver),
        lambda: check_op_count(s["op_n"], s["op_m"]),
        lambda: check_identities(s["identity_profiles"], rng, auction),
        lambda: check_incentives(s["pairs"], rng, auction),
        lambda: check_vcg_reduction(s["vcg_profiles"], rng, auction),
        lambda: check_grad_F(s["grad"], rng),
        lambda: check_batch_determinism(rng),
        lambda: check_myerson_dsic(rng),
    ]
    results = []
    for job in jobs:
        t0 = time.perf_counter()
        result = job()
        result.seconds = time.perf_counter() - t0
        results.append(result)
        if printer is not None:
            printer(VerifyReport([result]).lines()[0])
    return VerifyReport(results)
