"""Command-line driver: ``piecewise-guidance <subcommand> [options]``.

Exit codes: 0 success, 1 at least one run or check failed, 2 bad config.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .analysis import coefficient_curve, theorem_suite
from .experiment import (CURVE_COLUMNS, SUMMARY_COLUMNS, ConfigError, ExperimentConfig,
                         load_config, parse_config, run_grid, summarize_t0, write_csv)
from .guidance import GuidanceConfig

log = logging.getLogger("piecewise_guidance")

EXIT_OK, EXIT_RUN_FAILURE, EXIT_CONFIG = 0, 1, 2
THEOREM_TOL = 1e-10
THEOREM_COLUMNS = ("trial", "theorem", "t", "sigma_z", "closed_form", "lemma1_value",
                   "mc_estimate", "abs_err")


def _t0_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--out", type=Path, help="output directory (overrides config)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    p.add_argument("--seed", type=int, help="base seed; seeds become base, base+1, ...")
    g = p.add_argument_group("guidance overrides")
    g.add_argument("--t0", type=_t0_list, help="threshold, or comma-separated list")
    g.add_argument("--k1", type=float)
    g.add_argument("--k2", type=float)
    g.add_argument("--eta", type=float)
    g.add_argument("--sigma-z", type=float, dest="sigma_z")
    g.add_argument("--rt-schedule", dest="rt_schedule",
                   help="one-minus-alphabar | constant:<v>")
    g.add_argument("--guidance-weight", dest="weight", choices=("posterior", "alg1"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="piecewise-guidance", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run the problem x T0 x seed grid"),
                           ("sweep-t0", "run the grid and emit per-T0 curves")):
        _add_common(sub.add_parser(name, help=helptext))
    v = sub.add_parser("validate-theorems", help="closed-form KL vs Lemma-1 checks")
    _add_common(v)
    v.add_argument("--trials", type=int)
    v.add_argument("--inject-fault", type=float, default=None,
                   help="add this offset to every closed form (harness self-test)")
    c = sub.add_parser("coefficient-curve", help="write (1 - ab_t) / ab_t for t = 1..T")
    _add_common(c)
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    overrides = {k: getattr(args, k) for k in ("k1", "k2", "eta", "sigma_z", "rt_schedule", "weight")
                 if getattr(args, k, None) is not None}
    t0_values = cfg.t0_values
    if args.t0:
        t0_values = tuple(args.t0)
        T = cfg.schedule["T"]
        for v in t0_values:
            if not 0 <= v <= T + 1:
                raise ConfigError(f"T0={v} outside [0, T+1]")
    try:
        guidance = replace(cfg.guidance, T0=t0_values[0], **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    seeds = cfg.seeds
    if args.seed is not None:
        seeds = tuple(args.seed + i for i in range(len(seeds)))
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return replace(cfg, guidance=guidance, t0_values=t0_values, seeds=seeds,
                   output=args.out or cfg.output)


def cmd_run(args, curves: bool = False) -> int:
    cfg = _load(args)
    if not cfg.problems:
        raise ConfigError("config defines no problems")
    result = run_grid(cfg, jobs=args.jobs)
    print(f"wrote {cfg.output / 'summary.csv'} ({len(result.rows)} rows)")
    if curves:
        write_csv(cfg.output / "t0_curves.csv", CURVE_COLUMNS, summarize_t0(result.rows))
        print(f"wrote {cfg.output / 't0_curves.csv'}")
    failed = [r for r in result.rows if r["error"] is not None]
    for r in failed:
        print(f"FAILED problem={r['problem']} T0={r['T0']} seed={r['seed']}: {r['error']}",
              file=sys.stderr)
    return EXIT_OK if not failed else EXIT_RUN_FAILURE


def cmd_sweep_t0(args) -> int:
    return cmd_run(args, curves=True)


def cmd_validate(args) -> int:
    cfg = _load(args)
    v = cfg.validation
    schedule = cfg.make_schedule()
    fault = args.inject_fault if args.inject_fault is not None else float(v.get("fault", 0.0))
    trials = theorem_suite(schedule, n_trials=args.trials or int(v.get("trials", 100)),
                           seed=int(v.get("seed", 0)), fault=fault)
    rows = [{"trial": r.trial, "theorem": r.theorem, "t": r.t, "sigma_z": r.sigma_z,
             "closed_form": r.closed_form, "lemma1_value": r.lemma1_value,
             "mc_estimate": r.mc_estimate, "abs_err": r.abs_err} for r in trials]
    write_csv(cfg.output / "theorems.csv", THEOREM_COLUMNS, rows)
    _write_curve(cfg, schedule)
    bad = [r for r in rows if not r["abs_err"] <= THEOREM_TOL]
    for r in bad:
        print("FAILED " + ",".join(f"{k}={r[k]}" for k in THEOREM_COLUMNS), file=sys.stderr)
    print(f"{len(rows) - len(bad)}/{len(rows)} theorem checks within {THEOREM_TOL:g}")
    return EXIT_OK if not bad else EXIT_RUN_FAILURE


def _write_curve(cfg, schedule):
    curve = coefficient_curve(schedule)
    write_csv(cfg.output / "coefficient_curve.csv", ("t", "coefficient"),
              [{"t": int(t), "coefficient": c} for t, c in curve])


def cmd_coefficient_curve(args) -> int:
    cfg = _load(args)
    _write_curve(cfg, cfg.make_schedule())
    print(f"wrote {cfg.output / 'coefficient_curve.csv'}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep-t0": cmd_sweep_t0,
    "validate-theorems": cmd_validate,
    "coefficient-curve": cmd_coefficient_curve,
}


def main(argv=None) -> int:
    level = os.environ.get("PIECEWISE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
