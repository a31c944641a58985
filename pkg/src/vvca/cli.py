"""Command-line entry point: ``vvca <subcommand> [--config FILE] [--set key=value]``.

The config file is flat YAML. Keys left out fall back to the per-setting
defaults printed by ``vvca defaults``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from . import harness
from .domain import AuctionSize, check_setting, sample_batch, save_batch
from .mechanism import VvcaParams
from .odvvca import (DEFAULT_EVAL_SIZE, DEFAULT_ITERATIONS, DEFAULT_N_R, SmoothingConfig,
                     TrainConfig, evaluate_stream, tuned_defaults)

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Effective flat configuration; ``None`` means "use the setting default"."""

    setting: str = "A"
    n: int = 2
    m: int = 2
    method: str = "OD_VVCA"
    lr: Optional[float] = None
    iterations: int = DEFAULT_ITERATIONS
    batch_size: Optional[int] = None
    n_r: int = DEFAULT_N_R
    sigma: Optional[float] = None
    runs: int = 5
    seed: int = 0
    eval_size: int = DEFAULT_EVAL_SIZE
    output_dir: str = "runs"
    optimizer: str = "adam"
    eval_every: int = 10
    max_grad_norm: Optional[float] = None
    timings: bool = True

    @property
    def size(self) -> AuctionSize:
        return AuctionSize(self.n, self.m)

    def resolved(self) -> "RunConfig":
        """Fill unset hyperparameters from the per-setting defaults."""
        lr, sigma, batch, _ = tuned_defaults(self.setting, self.size)
        return replace(self,
                       lr=lr if self.lr is None else self.lr,
                       sigma=sigma if self.sigma is None else self.sigma,
                       batch_size=batch if self.batch_size is None else self.batch_size)

    def train_config(self) -> TrainConfig:
        r = self.resolved()
        return TrainConfig(method=r.method if r.method in ("OD_VVCA", "FO_VVCA") else "OD_VVCA",
                           learning_rate=r.lr, iterations=r.iterations, batch_size=r.batch_size,
                           smoothing=SmoothingConfig(sigma=r.sigma, n_r=r.n_r, seed=r.seed),
                           eval_size=r.eval_size, seed=r.seed, eval_every=r.eval_every,
                           optimizer=r.optimizer, max_grad_norm=r.max_grad_norm)


KEYS = {f.name: f for f in fields(RunConfig)}
_TYPES = {"setting": str, "method": str, "output_dir": str, "optimizer": str,
          "n": int, "m": int, "iterations": int, "batch_size": int, "n_r": int, "runs": int,
          "seed": int, "eval_size": int, "eval_every": int,
          "lr": float, "sigma": float, "max_grad_norm": float, "timings": bool}


def _coerce(key: str, value):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(KEYS)}")
    if value is None:
        return None
    kind = _TYPES[key]
    if isinstance(value, str) and kind is not str:
        value = yaml.safe_load(value)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    return str(value)


def load_config(path: Optional[str], overrides=(), seed: Optional[int] = None,
                method: Optional[str] = None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a flat mapping of key: value")
    values = {k: _coerce(k, v) for k, v in data.items()}
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        values[key.strip()] = _coerce(key.strip(), raw)
    if seed is not None:
        values["seed"] = seed
    if method is not None:
        values["method"] = method
    cfg = RunConfig(**values)
    try:
        cfg.setting = check_setting(cfg.setting)
        cfg.size
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.method = cfg.method.upper()
    if cfg.method not in harness.METHODS:
        raise ConfigError(f"unknown method {cfg.method!r}; expected one of {harness.METHODS}")
    return cfg


def render_config(cfg: RunConfig, fallback: bool = False) -> str:
    lines = []
    if fallback:
        lines.append(f"# fallback: no tuned defaults for {cfg.size} {cfg.setting}; "
                     "global defaults used")
    for key in KEYS:
        lines.append(yaml.safe_dump({key: getattr(cfg, key)}, default_flow_style=True,
                                    sort_keys=False).strip().strip("{}"))
    return "\n".join(lines) + "\n"


def print_config_defaults(setting: str, size: AuctionSize) -> str:
    _, _, _, fallback = tuned_defaults(setting, size)
    cfg = RunConfig(setting=check_setting(setting), n=size.n_bidders, m=size.n_items).resolved()
    return render_config(cfg, fallback)


def experiment_config(cfg: RunConfig) -> harness.ExperimentConfig:
    return harness.ExperimentConfig(cfg.setting, cfg.size, cfg.method, cfg.train_config(),
                                    cfg.runs, Path(cfg.output_dir), timings=cfg.timings)


def _print_report(report: harness.ExperimentReport):
    for seed, rev in zip(report.seeds, report.revenues):
        print(f"seed {seed}: revenue {rev:.6f}")
    print(f"mean {report.mean:.6f} std {report.std:.6f} runs {len(report.revenues)}")


# --------------------------------------------------------------------------
# subcommands

def cmd_sample(cfg: RunConfig, args) -> int:
    count = args.count or cfg.eval_size
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"batch_{cfg.setting}_{cfg.size}_seed{cfg.seed}.bin"
    save_batch(sample_batch(cfg.setting, cfg.size, count, cfg.seed), path)
    print(path)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    if cfg.method not in harness.TRAINED:
        raise ConfigError(f"train needs one of {harness.TRAINED}; use evaluate for {cfg.method}")
    _print_report(harness.run_experiment(experiment_config(cfg)))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    if args.params:
        params = VvcaParams.load(args.params)
        if (params.size.n_bidders, params.size.n_items) != (cfg.n, cfg.m):
            raise ConfigError(f"params are for {params.size}, config is {cfg.size}")
        s = evaluate_stream(params, cfg.setting, cfg.size, cfg.eval_size, cfg.seed)
        print(f"revenue {s.r_mean:.6f} (stderr {s.r_stderr:.6f}) z {s.z_mean:.6f} "
              f"f {s.f_mean:.6f} profiles {s.count}")
        print(f"mean {s.r_mean:.6f}")
        return EXIT_OK
    if cfg.method not in ("VCG", "ITEM_MYERSON"):
        raise ConfigError("evaluate needs --params or method VCG / ITEM_MYERSON")
    _print_report(harness.run_experiment(experiment_config(cfg)))
    return EXIT_OK


def cmd_grid(cfg: RunConfig, args) -> int:
    if cfg.size != AuctionSize(2, 2):
        raise ConfigError("the case-study grid is defined for 2x2 auctions only")
    batch = sample_batch(cfg.setting, cfg.size, args.profiles, cfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"surface_{cfg.setting}_seed{cfg.seed}.csv"
    harness.case_study_grid(args.x_range, args.y_range, args.grid_n, batch, path=path)
    print(path)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    batch = sample_batch(cfg.setting, cfg.size, args.profiles, cfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    bidder, mask = args.coordinate
    path = out / f"sweep_{cfg.setting}_{cfg.size}_b{bidder}_s{mask}_seed{cfg.seed}.csv"
    harness.smoothing_sweep(args.coordinate, tuple(args.range), tuple(args.sigmas), batch,
                            args.directions, seed=cfg.seed, path=path)
    print(path)
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args) -> int:
    report = harness.verify_suite(args.scale, seed=cfg.seed, printer=print)
    print("all checks passed" if report.passed else "verification FAILED")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_defaults(cfg: RunConfig, args) -> int:
    sys.stdout.write(print_config_defaults(cfg.setting, cfg.size))
    return EXIT_OK


# --------------------------------------------------------------------------
# parsing

def _pair(text: str):
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}")
    return lo, hi


def _coordinate(text: str):
    try:
        bidder, mask = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected bidder:mask, got {text!r}")
    return bidder, mask


def _sweep_range(text: str):
    try:
        lo, hi, points = text.split(":")
        return float(lo), float(hi), int(points)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi:points, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", "-c", help="flat YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--method", help="override the method")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="vvca", description="VVCA auction design experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sample", parents=[common], help="sample and save a valuation batch")
    p.add_argument("--count", type=int, help="profiles (default: eval_size)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", parents=[common], help="train and evaluate over seeded runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="held-out revenue of a mechanism")
    p.add_argument("--params", help="VVCA parameter JSON to evaluate")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", parents=[common], help="2x2 case-study revenue surface")
    p.add_argument("--x-range", type=_pair, default=(-1.0, 1.0))
    p.add_argument("--y-range", type=_pair, default=(-1.0, 1.0))
    p.add_argument("--grid-n", type=int, default=81)
    p.add_argument("--profiles", type=int, default=1024)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("sweep", parents=[common], help="smoothing sweep along one boost")
    p.add_argument("--coordinate", type=_coordinate, default=(0, 3), metavar="BIDDER:MASK")
    p.add_argument("--range", type=_sweep_range, default=(-0.5, 0.5, 101), metavar="LO:HI:N")
    p.add_argument("--sigmas", type=float, nargs="+", default=[0.001, 0.003, 0.01])
    p.add_argument("--directions", type=int, default=256)
    p.add_argument("--profiles", type=int, default=1024)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", parents=[common], help="run the property suite")
    p.add_argument("--scale", choices=("quick", "full"), default="quick")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("defaults", parents=[common], help="print the per-setting defaults")
    p.set_defaults(func=cmd_defaults)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.set, args.seed, args.method)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
