"""Reference values for the double-integrator wall scenario.

This script deliberately shares no code with the package beyond reading the
scenario's numbers from the YAML file. It rebuilds the plant, the LQR and
Kalman gains and the closed loop with plain numpy, then computes the
probability that the path reaches the wall in two independent ways:

* a Gaussian orthant probability for the vector (y_0, ..., y_T), from the
  exact joint covariance of the closed loop (scipy's multivariate normal CDF);
* vectorized Monte Carlo over the same closed loop with its own RNG.

Because the wall is a half-space and the path is piecewise linear, the robot
touches it exactly when some vertex has y_t >= wall - radius.

    python3 scripts/linear_oracle.py [-n 1000000] [--seed 20240611]
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import multivariate_normal, norm

ROOT = Path(__file__).resolve().parents[1]
SCENARIO = ROOT / "src" / "trajcp" / "data" / "double_integrator.yaml"
OUT = ROOT / "tests" / "data" / "linear_oracle.json"


def load(path=SCENARIO) -> dict:
    raw = yaml.safe_load(Path(path).read_text())
    dt = float(raw["dynamics"]["dt"])
    T = int(raw["nominal"]["controls"]["steps"])
    A = np.array([[1, 0, dt, 0], [0, 1, 0, dt], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
    B = np.array([[dt**2 / 2, 0], [0, dt**2 / 2], [dt, 0], [0, dt]])
    nz = raw["noise"]
    lq = raw["lqr"]
    wall = raw["environment"]["obstacles"][0]["lo"][1]
    radius = raw["robot"]["parts"][0]["radius"]
    return {
        "A": A, "B": B, "H": np.eye(4), "T": T,
        "P0": np.diag(nz["P0"]), "Vu": np.diag(nz["Vu"]), "Vx": np.diag(nz["Vx"]), "W": np.diag(nz["W"]),
        "Q": np.diag(lq["Q"]), "Qf": np.diag(lq["Qf"]), "R": float(lq["R"]) * np.eye(2),
        "threshold": float(wall) - float(radius),
    }


def gains(p: dict):
    A, B, H, T = p["A"], p["B"], p["H"], p["T"]
    # LQR: backward Riccati, u = L x
    S = p["Qf"]
    L = [None] * T
    for t in reversed(range(T)):
        L[t] = -np.linalg.inv(p["R"] + B.T @ S @ B) @ B.T @ S @ A
        S = p["Q"] + A.T @ S @ A - A.T @ S @ B @ np.linalg.inv(p["R"] + B.T @ S @ B) @ B.T @ S @ A
    # Kalman: forward, prior -> gain -> posterior
    P = p["P0"]
    K = []
    for _ in range(T):
        M = A @ P @ A.T + B @ p["Vu"] @ B.T + p["Vx"]
        G = M @ H.T @ np.linalg.inv(H @ M @ H.T + p["W"])
        K.append(G)
        P = (np.eye(4) - G @ H) @ M
    return np.array(L), np.array(K)


def augmented(p: dict, L, K):
    """Transition and noise maps for z = (deviation, estimate), noise (vu, vx, w)."""
    A, B, H = p["A"], p["B"], p["H"]
    F, G = [], []
    for t in range(p["T"]):
        top = np.hstack([A, B @ L[t]])
        bot = np.hstack([K[t] @ H @ A, A + B @ L[t] - K[t] @ H @ A])
        F.append(np.vstack([top, bot]))
        gtop = np.hstack([B, np.eye(4), np.zeros((4, 4))])
        gbot = np.hstack([K[t] @ H @ B, K[t] @ H, K[t]])
        G.append(np.vstack([gtop, gbot]))
    Nz = np.zeros((10, 10))
    Nz[:2, :2] = p["Vu"]
    Nz[2:6, 2:6] = p["Vx"]
    Nz[6:, 6:] = p["W"]
    return F, G, Nz


def joint_y_covariance(p: dict, L, K) -> np.ndarray:
    """Covariance of (y_0, ..., y_T) under the linear closed loop."""
    F, G, Nz = augmented(p, L, K)
    T = p["T"]
    C = [np.zeros((8, 8))]
    C[0][:4, :4] = p["P0"]
    for t in range(T):
        C.append(F[t] @ C[t] @ F[t].T + G[t] @ Nz @ G[t].T)
    Y = np.zeros((T + 1, T + 1))
    for s in range(T + 1):
        Phi = np.eye(8)
        for t in range(s, T + 1):
            # Cov(z_t, z_s) = Phi(t, s) C_s
            Y[t, s] = Y[s, t] = (Phi @ C[s])[1, 1]
            if t < T:
                Phi = F[t] @ Phi
    return Y


def simulate(p: dict, L, K, n: int, seed: int, chunk: int = 200_000):
    A, B, H, T = p["A"], p["B"], p["H"], p["T"]
    rng = np.random.default_rng(seed)
    c = p["threshold"]
    hits = 0
    terminal = 0
    cP0, cVu, cVx, cW = (np.linalg.cholesky(p[k]) for k in ("P0", "Vu", "Vx", "W"))
    done = 0
    while done < n:
        m = min(chunk, n - done)
        e = rng.standard_normal((m, 4)) @ cP0.T
        xh = np.zeros((m, 4))
        top = e[:, 1].copy()
        for t in range(T):
            ub = xh @ L[t].T
            vu = rng.standard_normal((m, 2)) @ cVu.T
            vx = rng.standard_normal((m, 4)) @ cVx.T
            w = rng.standard_normal((m, 4)) @ cW.T
            e = e @ A.T + (ub + vu) @ B.T + vx
            pred = xh @ A.T + ub @ B.T
            xh = pred + (w + (e - pred) @ H.T) @ K[t].T
            np.maximum(top, e[:, 1], out=top)
        hits += int(np.count_nonzero(top >= c))
        terminal += int(np.count_nonzero(e[:, 1] >= c))
        done += m
    return hits, terminal


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-n", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=20240611)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()

    p = load()
    L, K = gains(p)
    Y = joint_y_covariance(p, L, K)
    c = p["threshold"]
    sd = np.sqrt(np.diag(Y))
    orthant = 1.0 - multivariate_normal.cdf(np.full(len(Y), c), mean=np.zeros(len(Y)), cov=Y,
                                            maxpts=2_000_000, abseps=1e-8, releps=1e-7)
    terminal_tail = float(norm.sf(c / sd[-1]))

    t0 = time.perf_counter()
    hits, term = simulate(p, L, K, args.n, args.seed)
    elapsed = time.perf_counter() - t0
    p_mc = hits / args.n
    out = {
        "threshold": c,
        "y_std": [float(s) for s in sd],
        "p_orthant": float(orthant),
        "terminal_tail": terminal_tail,
        "mc": {
            "n": args.n, "seed": args.seed, "hits": hits,
            "p": p_mc, "sigma": float(np.sqrt(p_mc * (1 - p_mc) / args.n)),
            "terminal_rate": term / args.n, "seconds": round(elapsed, 1),
        },
        "L0": L[0].tolist(),
        "K0": K[0].tolist(),
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps({k: v for k, v in out.items() if k not in ("L0", "K0", "y_std")}, indent=2))


if __name__ == "__main__":
    main()
