"""Cost of likelihood ratios relative to plain Monte Carlo.

Times, per 1000 samples on a shipped scenario: naive sampling (rollouts and
swept collision checks only), fixed mixture IS and adaptive IS, plus the
density evaluation alone. Absolute times depend on the machine; the ratios
are the quantity of interest.

    python3 scripts/benchmark.py [--scenario airplane] [-m 2000] [--repeats 3]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from trajcp.estimator import ais_estimate, draw_noise, is_fixed, naive_mc
from trajcp.gauss import mixture_log_density
from trajcp.pipeline import build_components, find_modes, problem_for
from trajcp.scenario import example_path, load_scenario


def best_of(repeats: int, fn) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="airplane", help="shipped scenario name")
    ap.add_argument("-m", type=int, default=2000)
    ap.add_argument("-k", type=int, default=20)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    sc = load_scenario(example_path(args.scenario))
    t0 = time.perf_counter()
    problem = problem_for(sc)
    mixture = build_components(sc, find_modes(sc))
    setup = time.perf_counter() - t0
    # warm up compiled kernels
    naive_mc(problem, args.k, seed=1)
    is_fixed(problem, mixture, args.k, seed=1)

    m = args.m
    per_k = 1000.0 / m
    t_naive = best_of(args.repeats, lambda: naive_mc(problem, m, seed=0)) * per_k
    t_is = best_of(args.repeats, lambda: is_fixed(problem, mixture, m, seed=0)) * per_k
    t_ais = best_of(args.repeats, lambda: ais_estimate(problem, mixture, args.k, m // args.k, seed=0)) * per_k
    noise, _ = draw_noise(mixture.specs, mixture.weights, 0, range(m))
    t_dens = best_of(args.repeats, lambda: (mixture_log_density(mixture.specs, mixture.weights, noise),
                                            problem.nominal.log_density(noise))) * per_k

    print(f"scenario {sc.name}: D={mixture.D}, noise dim {sc.noise.layout.size}, T={sc.T}")
    print(f"setup (linearization, gains, close points, components): {setup:.2f} s")
    print(f"{'method':<22}{'s / 1000 samples':>18}{'vs naive':>10}")
    for name, t in (("naive", t_naive), ("is (fixed mixture)", t_is), ("ais", t_ais), ("densities only", t_dens)):
        print(f"{name:<22}{t:>18.3f}{t / t_naive:>10.2f}")
    print(f"density overhead over naive: {np.round(100 * (t_is - t_naive) / t_naive, 1)}%")


if __name__ == "__main__":
    main()
