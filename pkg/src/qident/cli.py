"""Command-line interface.

Subcommands: ``simulate`` (run an experiment from a TOML config file),
``crlb`` (tabulate the per-observation information weight over a grid),
``example1`` (the built-in third-order preset), ``validate`` (config and
weight-schedule checks).  Flags override file values which override
defaults.  Exit codes: 0 success, 1 validation/usage error, 2 runtime or
numeric error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from ._version import __version__
from .crlb import rho
from .harness import (
    ConfigError,
    config_warnings,
    efficiency_report,
    example1_config,
    load_config,
    rate_slope,
    run_experiment,
)
from .numerics import DomainError, PositiveDefiniteError

ENV_OUTDIR = "QIDENT_OUTDIR"


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_outdir() -> str:
    return os.environ.get(ENV_OUTDIR, ".")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qident", description=__doc__)
    parser.add_argument("--version", action="version", version=f"qident {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--outdir", default=None, help=f"output directory (default: ${ENV_OUTDIR} or .)")
    common.add_argument("--jobs", type=int, default=1, help="worker process cap (default 1)")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--trials", type=int, default=None, help="Monte-Carlo trial count")
    common.add_argument("--horizon", type=int, default=None, help="steps per trial")
    common.add_argument("--trace", action="store_true", help="also write a per-step trace of trial 0")

    p_sim = sub.add_parser("simulate", parents=[common], help="run an experiment from a config file")
    p_sim.add_argument("config", type=Path)
    p_sim.add_argument("--name", default=None, help="output file prefix (default: config name)")

    p_crlb = sub.add_parser("crlb", parents=[common], help="tabulate the information weight over a grid")
    p_crlb.add_argument("config", type=Path)
    p_crlb.add_argument("--name", default=None)
    p_crlb.add_argument("--x-min", type=float, default=None, help="grid start (default -6 sigma)")
    p_crlb.add_argument("--x-max", type=float, default=None, help="grid end (default 6 sigma)")
    p_crlb.add_argument("--x-num", type=int, default=121, help="grid point count (default 121)")

    p_ex1 = sub.add_parser("example1", parents=[common], help="run the third-order preset")

    p_val = sub.add_parser("validate", parents=[common], help="check a config file")
    p_val.add_argument("config", type=Path)

    return parser


def _overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.trials is not None:
        out["trials"] = args.trials
    if args.horizon is not None:
        out["horizon"] = args.horizon
    out["jobs"] = args.jobs
    out["trace"] = bool(args.trace)
    out["outdir"] = Path(args.outdir if args.outdir is not None else _default_outdir())
    return out


def _cmd_simulate(args) -> int:
    over = _overrides(args)
    if args.name is not None:
        over["name"] = args.name
    cfg = load_config(args.config, **over)
    for msg in config_warnings(cfg):
        print(f"warning: {msg}", file=sys.stderr)
    metrics = run_experiment(cfg)
    _summarize(cfg, metrics)
    return 0


def _cmd_example1(args) -> int:
    cfg = example1_config(**_overrides(args))
    metrics = run_experiment(cfg)
    _summarize(cfg, metrics)
    return 0


def _summarize(cfg, metrics) -> None:
    for est in cfg.estimators:
        line = f"{est}: mse(k={cfg.horizon}) = {metrics.mse(est)[-1]:.6g}"
        try:
            line += f", rate slope = {rate_slope(metrics, est):.3f}"
        except DomainError:
            pass
        print(line)
    if "ibid" in cfg.estimators:
        rep = efficiency_report(metrics)
        print(f"ibid: k*mse/k*trace(bound) at k={cfg.horizon}: {rep.r1['ibid'][-1]:.4f}")
    outdir = cfg.outdir if cfg.outdir is not None else Path(_default_outdir())
    print(f"wrote {outdir / (cfg.name + '_metrics.csv')}")


def _cmd_crlb(args) -> int:
    cfg = load_config(args.config, outdir=Path(args.outdir or _default_outdir()))
    name = args.name or cfg.name
    sigma = cfg.system.noise.sigma
    x_min = args.x_min if args.x_min is not None else -6.0 * sigma
    x_max = args.x_max if args.x_max is not None else 6.0 * sigma
    if args.x_num < 2 or not (x_max > x_min):
        raise ConfigError(["crlb grid: need x_max > x_min and at least 2 points"])
    grid = np.linspace(x_min, x_max, args.x_num)
    vals = rho(grid, cfg.system.quantizer, cfg.system.noise)
    outdir = Path(args.outdir or _default_outdir())
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"{name}_rho.csv"
    lines = ["x,rho"]
    lines += [f"{format(x, '.12g')},{format(v, '.12g')}" for x, v in zip(grid, vals)]
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path}")
    return 0


def _cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as err:
        for msg in err.errors:
            print(f"error: {msg}", file=sys.stderr)
        return 1
    for msg in config_warnings(cfg):
        print(f"warning: {msg}")
    print(f"{args.config}: ok")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "crlb": _cmd_crlb,
    "example1": _cmd_example1,
    "validate": _cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0; usage errors exit 1
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        for msg in err.errors:
            print(f"error: {msg}", file=sys.stderr)
        return 1
    except (DomainError, PositiveDefiniteError, ArithmeticError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
