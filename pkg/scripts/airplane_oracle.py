"""Reference collision probability for the shipped airplane scenario.

Runs plain Monte Carlo with a large sample count (default 10^6) on a seed
that the tests never use and stores the result in tests/data.

    python3 scripts/airplane_oracle.py [-m 1000000] [--seed 987654321]
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from trajcp.estimator import naive_mc
from trajcp.pipeline import problem_for
from trajcp.scenario import example_path, load_scenario

OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / "airplane_oracle.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-m", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=987654321)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()

    sc = load_scenario(example_path("airplane"))
    problem = problem_for(sc)
    t0 = time.perf_counter()
    est = naive_mc(problem, args.m, args.seed, chunk=20_000)
    elapsed = time.perf_counter() - t0
    out = {
        "problem_hash": sc.problem_digest(),
        "m": args.m,
        "seed": args.seed,
        "p": est.p_hat,
        "sigma": est.sigma_hat,
        "hits": est.hits,
        "domain_exits": est.domain_exits,
        "seconds": round(elapsed, 1),
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
