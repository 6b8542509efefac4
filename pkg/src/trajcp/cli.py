"""Command line entry point.

    trajcp validate SCENARIO
    trajcp closepoints SCENARIO [--top N]
    trajcp components SCENARIO [--components D] [--weight-init uniform|halfspace]
    trajcp estimate SCENARIO --method naive|is|ais [-m M] [-k K] [--iterations L] [-o result.json]
    trajcp report RESULT.json [RESULT.json ...] --out DIR

Exit status is 0 on success, 2 when the scenario or the arguments are
invalid and 3 when a pipeline stage fails at run time. Set TRAJCP_THREADS
(or pass --threads) to cap the number of sampling threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .estimator import THREADS_ENV
from .scenario import Scenario, ScenarioError, load_scenario

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3

log = logging.getLogger("trajcp")


def _scenario_arg(p: argparse.ArgumentParser):
    p.add_argument("scenario", type=Path, help="scenario YAML file")


def _mixture_args(p: argparse.ArgumentParser):
    p.add_argument("--components", "-D", type=int, help="component budget D, nominal included")
    p.add_argument("--defensive-floor", type=float, help="lower bound on the nominal weight")
    p.add_argument("--weight-init", choices=("uniform", "halfspace"))
    p.add_argument("--covariance", choices=("optimize", "mean_shift"),
                   help="optimize component covariances or keep the nominal ones")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajcp", description="Collision probability of LQG-controlled trajectories.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a scenario file")
    _scenario_arg(p)

    p = sub.add_parser("closepoints", help="rank collision modes along the nominal trajectory")
    _scenario_arg(p)
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--json", type=Path, help="also write the modes to this file")

    p = sub.add_parser("components", help="build the proposal mixture")
    _scenario_arg(p)
    _mixture_args(p)

    p = sub.add_parser("estimate", help="estimate the collision probability")
    _scenario_arg(p)
    p.add_argument("--method", choices=("naive", "is", "ais"))
    _mixture_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("-m", type=int, dest="m", help="total samples (naive, is)")
    p.add_argument("-k", type=int, dest="k", help="samples per adaptive batch")
    p.add_argument("--iterations", type=int, help="number of adaptive batches")
    p.add_argument("--step-size", type=float, help="mirror descent step size C")
    p.add_argument("--threads", type=int, help=f"sampling threads (overrides {THREADS_ENV})")
    p.add_argument("-o", "--output", type=Path, help="result record (JSON)")

    p = sub.add_parser("report", help="CSV traces, convergence plot and table from result records")
    p.add_argument("results", type=Path, nargs="+")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--reference", type=float, help="reference probability drawn as a dashed line")
    return ap


def _load(args) -> Scenario:
    sc = load_scenario(args.scenario)
    mix = {k: v for k, v in (("components", getattr(args, "components", None)),
                             ("defensive_floor", getattr(args, "defensive_floor", None)),
                             ("weight_init", getattr(args, "weight_init", None)),
                             ("covariance", getattr(args, "covariance", None))) if v is not None}
    if mix:
        sc = sc.with_mixture(**mix)
    est = {k: getattr(args, k, None) for k in ("method", "seed", "m", "k", "iterations", "step_size")}
    est = {k: v for k, v in est.items() if v is not None}
    if est:
        sc = sc.with_estimator(**est)
    return sc


def cmd_validate(args) -> int:
    sc = _load(args)
    print(f"{args.scenario}: ok")
    print(f"  name       {sc.name}")
    print(f"  model      {type(sc.model).__name__} (dx={sc.model.dx}, du={sc.model.du}, dz={sc.model.dz})")
    print(f"  horizon    T={sc.T}, dt={sc.dt:g}")
    print(f"  robot      {', '.join(sc.robot.names)}")
    print(f"  obstacles  {', '.join(sc.env.names)}")
    print(f"  noise dim  {sc.noise.layout.size}")
    print(f"  hash       {sc.digest()}")
    return EXIT_OK


def cmd_closepoints(args) -> int:
    from .pipeline import find_modes

    sc = _load(args)
    modes = find_modes(sc, top=args.top)
    print(f"{'rank':>4} {'t':>4} {'part':<14} {'obstacle':<16} {'maha':>9} {'maha_newton':>12}")
    for r, m in enumerate(modes, 1):
        print(f"{r:>4} {m.t:>4} {m.part_name:<14} {m.obstacle_name:<16} {m.maha:>9.4f} {m.maha_newton:>12.4f}")
    if args.json:
        args.json.write_text(json.dumps([m.to_dict() for m in modes], indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_components(args) -> int:
    from .pipeline import build_components, find_modes

    sc = _load(args)
    mix = build_components(sc, find_modes(sc))
    print(f"{'d':>3} {'t':>4} {'part':<14} {'obstacle':<16} {'maha':>8} {'objective':>10} {'mean-shift':>11} {'alpha':>7}")
    for d, (c, a) in enumerate(zip(mix.components, mix.weights), 1):
        s = c.summary()
        print(f"{d:>3} {s['t']:>4} {s['part']!s:<14} {s['obstacle']!s:<16} {s['maha']:>8.4f} "
              f"{s['objective']:>10.4f} {s['objective_mean_shift']:>11.4f} {a:>7.4f}")
    print(f"{mix.D:>3} {'nominal':>4} {'':<14} {'':<16} {'':>8} {'':>10} {'':>11} {mix.weights[-1]:>7.4f}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    from .pipeline import run_estimate, summary_line

    if args.threads is not None:
        if args.threads < 1:
            raise ScenarioError("--threads", "must be at least 1")
        os.environ[THREADS_ENV] = str(args.threads)
    sc = _load(args)
    rec = run_estimate(sc)
    print(summary_line(rec))
    if args.output:
        rec.save(args.output)
        print(f"result written to {args.output}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import ResultRecord
    from .report import emit_report

    try:
        records = [ResultRecord.load(p) for p in args.results]
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ScenarioError("results", f"cannot read result record ({exc})") from None
    files = emit_report(records, args.out, args.reference)
    for kind, path in files.items():
        print(f"{kind:<6} {path}")
    print(files["table"].read_text(encoding="utf-8"), end="")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "closepoints": cmd_closepoints,
    "components": cmd_components,
    "estimate": cmd_estimate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import StageError

    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - anything else is a run-time failure
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
