"""Convergence comparison of naive MC, fixed mixture IS and adaptive mixture IS.

Runs the three estimators on the shipped airplane scenario at a matched
sample budget, saves one result record per method and writes the report
(trace CSV, convergence SVG, summary table) with the reference probability
from tests/data/airplane_oracle.json drawn as a dashed line.

    python3 scripts/reproduce_figure.py [--samples 2000] [--seed 0] [--out results/figure]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from trajcp.pipeline import run_estimate, summary_line
from trajcp.report import emit_report
from trajcp.scenario import example_path, load_scenario

ROOT = Path(__file__).resolve().parents[1]
ORACLE = ROOT / "tests" / "data" / "airplane_oracle.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", type=Path, default=example_path("airplane"))
    ap.add_argument("--samples", type=int, default=2000, help="sample budget per method")
    ap.add_argument("-k", type=int, default=20, help="adaptive batch size")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=ROOT / "results" / "figure")
    args = ap.parse_args()
    if args.samples % args.k:
        ap.error("--samples must be a multiple of -k")

    base = load_scenario(args.scenario).with_estimator(seed=args.seed)
    runs = {
        "naive": base.with_estimator(method="naive", m=args.samples),
        # non-adaptive IS is a single batch holding the whole budget
        "is": base.with_estimator(method="is", m=args.samples),
        "ais": base.with_estimator(method="ais", k=args.k, iterations=args.samples // args.k),
    }
    args.out.mkdir(parents=True, exist_ok=True)
    records = []
    for name, sc in runs.items():
        rec = run_estimate(sc)
        rec.save(args.out / f"{name}.json")
        print(summary_line(rec))
        records.append(rec)

    reference = json.loads(ORACLE.read_text())["p"] if ORACLE.exists() else None
    files = emit_report(records, args.out, reference)
    print(files["table"].read_text(), end="")
    for kind, path in files.items():
        print(f"{kind:<6} {path}")


if __name__ == "__main__":
    main()
