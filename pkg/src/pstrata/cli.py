"""Command-line interface.

Exit status: 0 success, 1 user error (bad flags, config, data or files),
2 numerical failure, 3 completed with warnings.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .artifacts import ArtifactError
from .config import ConfigError, RunConfig, load_config
from .data import DataError, StrataConfig
from .estimands import EstimandError
from .likelihood import NonFiniteLogPosterior
from .sampler import SamplerError
from .simulate import PRESETS

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_USER", "EXIT_NUMERIC", "EXIT_WARN"]

EXIT_OK, EXIT_USER, EXIT_NUMERIC, EXIT_WARN = 0, 1, 2, 3

log = logging.getLogger("pstrata")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="top-level seed for all randomness")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--er", dest="er", action=argparse.BooleanOptionalAction, default=None,
                   help="impose the exclusion restriction")
    p.add_argument("--monotonicity", action=argparse.BooleanOptionalAction, default=None,
                   help="rule out defiers")
    p.add_argument("--family", choices=("weibull", "lognormal"))
    p.add_argument("--data", help="dataset CSV (overrides data.path)")


def _estimand_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--integration", choices=("closed", "trapezoid", "simpson"))
    p.add_argument("--k", type=int, help="quadrature intervals for numerical RACE")
    p.add_argument("--points", type=int, help="time grid size")
    p.add_argument("--t-max", type=float, help="end of the time grid")
    p.add_argument("--max-draws", type=int, help="thin to at most this many draws")
    p.add_argument("--per-draw", action="store_true", default=None,
                   help="also write per-draw survival curves")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pstrata",
        description="Principal stratification for survival outcomes under noncompliance.")
    parser.add_argument("--version", action="version", version=f"pstrata {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic trial")
    _common(p)
    p.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    p.add_argument("--n", type=int, help="number of units")

    p = sub.add_parser("fit", help="sample the posterior with HMC")
    _common(p)
    _model_flags(p)
    p.add_argument("--chains", type=int)
    p.add_argument("--iters", type=int, help="iterations per chain, warmup included")
    p.add_argument("--warmup", type=int)
    p.add_argument("--step-size", type=float,
                   help="fixed leapfrog step size; disables adaptation")

    p = sub.add_parser("estimate", help="posterior causal estimands from a fit")
    _common(p)
    _model_flags(p)
    _estimand_flags(p)
    p.add_argument("--fit", required=True, help="directory written by `pstrata fit`")

    p = sub.add_parser("report", help="panel data, summary tables and figures")
    p.add_argument("--estimates", required=True, help="directory written by `pstrata estimate`")
    p.add_argument("--out", help="output directory")
    p.add_argument("--truth", help="preset name or scenario YAML to overlay true curves")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("verify", help="check metadata consistency of output directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _resolve(args, default_config: Path | None = None) -> RunConfig:
    """Config file, then flags; flags win."""
    path = args.config or (default_config if default_config and default_config.is_file()
                           else None)
    cfg = load_config(path)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["output"] = args.out
    if getattr(args, "family", None):
        changes["family"] = args.family
    if getattr(args, "data", None):
        changes["data"] = replace(cfg.data, path=args.data)
    er, mono = getattr(args, "er", None), getattr(args, "monotonicity", None)
    if er is not None or mono is not None:
        s = cfg.strata
        er = s.exclusion_restriction if er is None else er
        mono = s.monotonicity if mono is None else mono
        if mono != s.monotonicity:
            changes["strata"] = StrataConfig.default(er, mono, s.reference_stratum)
        else:
            changes["strata"] = replace(s, exclusion_restriction=er)
    hmc = {}
    for flag, key in (("chains", "chains"), ("iters", "iterations"), ("warmup", "warmup"),
                      ("step_size", "step_size")):
        v = getattr(args, flag, None)
        if v is not None:
            hmc[key] = v
    if hmc:
        try:
            changes["hmc"] = replace(cfg.hmc, **hmc)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    est = {}
    for flag in ("integration", "k", "points", "t_max", "max_draws", "per_draw"):
        v = getattr(args, flag, None)
        if v is not None:
            est[flag] = v
    if est:
        changes["estimands"] = replace(cfg.estimands, **est)
    if getattr(args, "preset", None):
        changes["simulation"] = {"preset": args.preset}
    if getattr(args, "n", None) is not None:
        base = changes.get("simulation", cfg.simulation)
        if base is None:
            raise ConfigError("--n needs a preset or simulation block")
        base = {"preset": base} if isinstance(base, str) else dict(base)
        changes["simulation"] = {**base, "n": args.n}
    try:
        return replace(cfg, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _finish(result) -> int:
    for w in result.warnings:
        log.warning(w)
    for f in result.files:
        log.info("wrote %s", f)
    return EXIT_WARN if result.warnings else EXIT_OK


def _run(args) -> int:
    from . import pipeline

    if args.command == "simulate":
        return _finish(pipeline.run_simulate(_resolve(args)))
    if args.command == "fit":
        return _finish(pipeline.run_fit(_resolve(args)))
    if args.command == "estimate":
        fit_dir = Path(args.fit)
        if not fit_dir.is_dir():
            raise ArtifactError(f"fit directory not found: {fit_dir}")
        cfg = _resolve(args, default_config=fit_dir / pipeline.CONFIG_FILE)
        return _finish(pipeline.run_estimate(cfg, fit_dir, args.out))
    if args.command == "report":
        return _finish(pipeline.run_report(args.estimates, args.out, truth=args.truth,
                                           figures=not args.no_figures))
    if args.command == "verify":
        result = pipeline.run_verify(args.dirs)
        for problem in result.warnings:
            print(f"FAIL {problem}")
        print(f"checked {len(result.files)} files: "
              f"{'consistent' if not result.warnings else 'inconsistent'}")
        return EXIT_USER if result.warnings else EXIT_OK
    raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except (ConfigError, DataError, ArtifactError, EstimandError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (SamplerError, NonFiniteLogPosterior, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
