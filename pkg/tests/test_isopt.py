from __future__ import annotations

import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.stats import norm

from trajcp.gauss import TrajectoryNoise
from trajcp.isopt import (
    Blocks,
    MixtureSpec,
    RankDeficiencyError,
    _gradient_S,
    build_mixture,
    initial_weights,
    mean_shift_ls,
    optimize_component,
    optimize_proposal,
    renyi_objective,
)


def random_blocks(rng, sizes):
    out = []
    for n in sizes:
        A = rng.standard_normal((n, n))
        out.append(A @ A.T + n * np.eye(n))
    return out


# -- objective --------------------------------------------------------------

@pytest.mark.parametrize("mu, s, r", [(0.0, 1.0, 1.0), (2.0, 1.0, 1.0), (1.5, 2.0, 1.0), (-0.5, 0.7, 0.5)])
def test_renyi_objective_against_quadrature(mu, s, r):
    """log of the integral of p^2 / q for p = N(0, r), q = N(mu, s)."""
    def integrand(x):
        return math.exp(2 * norm.logpdf(x, 0, math.sqrt(r)) - norm.logpdf(x, mu, math.sqrt(s)))

    val, _ = quad(integrand, -30, 30, limit=400, points=[0.0, mu], epsabs=0, epsrel=1e-12)
    assert renyi_objective([mu], [[[s]]], [[[r]]]) == pytest.approx(math.log(val), abs=1e-8)


def test_renyi_objective_infinite_outside_domain():
    assert renyi_objective([0.0], [[[0.5]]], [[[1.0]]]) == math.inf
    assert renyi_objective([0.0], [[[0.4]]], [[[1.0]]]) == math.inf


def test_renyi_objective_multiblock_matches_dense(rng):
    R = random_blocks(rng, [2, 3, 3, 1])
    S = [1.3 * b for b in R]
    mu = rng.standard_normal(9)
    Rd, Sd = Blocks(R).dense(), Blocks(S).dense()
    M = 2 * Sd - Rd
    want = mu @ np.linalg.solve(M, mu) - 0.5 * (np.linalg.slogdet(M)[1] + np.linalg.slogdet(Rd)[1]
                                               - 2 * np.linalg.slogdet(Sd)[1])
    assert renyi_objective(mu, S, R) == pytest.approx(want, abs=1e-10)


def test_gradient_matches_finite_differences(rng):
    R = Blocks(random_blocks(rng, [2, 3]))
    S = R.like([1.4 * s for s in R.stacks])
    mu = rng.standard_normal(5)
    G = _gradient_S(mu, S, R)
    h = 1e-6
    for g_idx, st_ in enumerate(S.stacks):
        for b in range(st_.shape[0]):
            for i in range(st_.shape[1]):
                for j in range(i, st_.shape[1]):
                    E = np.zeros_like(st_)
                    E[b, i, j] += h
                    E[b, j, i] += h if i != j else 0.0
                    plus = S.like([s + E if k == g_idx else s for k, s in enumerate(S.stacks)])
                    minus = S.like([s - E if k == g_idx else s for k, s in enumerate(S.stacks)])
                    fd = (renyi_objective(mu, plus, R) - renyi_objective(mu, minus, R)) / (2 * h)
                    an = G[g_idx][b, i, j] * (1 if i == j else 2)
                    assert an == pytest.approx(fd, rel=1e-5, abs=1e-7)


# -- least squares and the proposal optimizer ------------------------------

def test_mean_shift_is_minimum_norm(rng):
    R = random_blocks(rng, [3, 2, 4])
    C = rng.standard_normal((2, 9))
    b = rng.standard_normal(2)
    mu = mean_shift_ls(C, R, b)
    assert np.allclose(C @ mu, b, atol=1e-10)
    Rd = Blocks(R).dense()
    L = np.linalg.cholesky(Rd)
    # whitened minimum-norm solution via the pseudo-inverse
    want = L @ np.linalg.pinv(C @ L) @ b
    assert np.allclose(mu, want, atol=1e-10)


def test_mean_shift_rank_deficiency():
    with pytest.raises(RankDeficiencyError):
        mean_shift_ls(np.array([[1.0, 0.0], [2.0, 0.0]]), [np.eye(2)], np.array([1.0, 2.0]))


def _scalar_optimum(b):
    """Minimize b^2/(2s-1) - log((2s-1)/s^2)/2 over s > 1/2."""
    df = lambda s: -2 * b * b / (2 * s - 1) ** 2 - 1 / (2 * s - 1) + 1 / s
    s = brentq(df, 0.5 + 1e-9, 1e6)
    return s, b * b / (2 * s - 1) - 0.5 * math.log((2 * s - 1) / s**2)


@pytest.mark.parametrize("b", [0.5, 2.0, 3.0])
def test_scalar_toy_strict_improvement(b):
    res = optimize_proposal(np.array([[1.0]]), [np.eye(1)], np.array([b]))
    s_opt, f_opt = _scalar_optimum(b)
    assert res.initial_objective == pytest.approx(b * b)
    assert res.objective < res.initial_objective
    assert res.objective == pytest.approx(f_opt, abs=1e-6)
    assert res.S[0][0, 0] == pytest.approx(s_opt, rel=1e-3)
    assert res.mu[0] == pytest.approx(b)


def test_inactive_blocks_keep_nominal_law(rng):
    R = random_blocks(rng, [2, 2, 2])
    C = np.hstack([rng.standard_normal((1, 2)), np.zeros((1, 2)), rng.standard_normal((1, 2))])
    res = optimize_proposal(C, R, np.array([1.0]))
    assert np.array_equal(res.mu[2:4], [0.0, 0.0])
    assert np.array_equal(res.S[1], R[1])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), rows=st.integers(1, 3))
def test_optimizer_invariants(seed, rows):
    rng = np.random.default_rng(seed)
    R = random_blocks(rng, [int(k) for k in rng.integers(1, 4, size=4)])
    n = sum(r.shape[0] for r in R)
    C = rng.standard_normal((rows, n))
    b = 2.0 * rng.standard_normal(rows)
    res = optimize_proposal(C, R, b, max_alternations=10)
    assert res.objective <= res.initial_objective + 1e-12
    assert np.abs(C @ res.mu - b).max() < 1e-8
    for S_b, R_b in zip(res.S, R):
        assert np.all(np.linalg.eigvalsh(2 * S_b - R_b) > 0)
    assert all(b2 <= a + 1e-12 for a, b2 in zip(res.history, res.history[1:]))


# -- weights and the mixture container -------------------------------------

def test_initial_weights():
    w = initial_weights(10, 0.1, 0.5)
    assert np.allclose(w[:-1], 0.5 / 9) and w[-1] == 0.5
    w = initial_weights(3, 0.1, 0.5, halfspace=[0.3, 0.1])
    assert np.allclose(w, [0.375, 0.125, 0.5])
    assert np.array_equal(initial_weights(1, 0.1), [1.0])
    assert initial_weights(4, 0.6, 0.5)[-1] == 0.6


def test_mixture_spec_validation(linear_scenario):
    nom = linear_scenario.noise
    MixtureSpec([], nom, [1.0])
    with pytest.raises(ValueError):
        MixtureSpec([], nom, [0.5])
    with pytest.raises(ValueError, match="floor"):
        MixtureSpec([], nom, [1.0], defensive_floor=1.0)
    assert MixtureSpec.nominal_only(nom).D == 1


def test_build_mixture_shrinks_and_handles_no_modes(linear_scenario, linear_modes):
    sc = linear_scenario
    mix = build_mixture(linear_modes[:2], sc.design, sc.noise, D=10, covariance="mean_shift")
    assert mix.D == 3
    assert mix.weights[-1] == 0.5
    empty = build_mixture([], sc.design, sc.noise, D=10)
    assert empty.D == 1 and np.array_equal(empty.weights, [1.0])
    with pytest.raises(ValueError):
        build_mixture(linear_modes, sc.design, sc.noise, weight_init="bogus")
    with pytest.raises(ValueError):
        optimize_component(linear_modes[0], sc.design, sc.noise, covariance="bogus")


def test_halfspace_initialization(linear_scenario, linear_modes):
    sc = linear_scenario
    mix = build_mixture(linear_modes, sc.design, sc.noise, D=3, weight_init="halfspace",
                        checker=sc.checker, covariance="mean_shift")
    # the half-space tail of the terminal mode is larger, so it gets more weight
    assert mix.weights[0] > mix.weights[1]
    tails = [norm.sf(m.maha) for m in linear_modes[:2]]
    assert mix.weights[0] / mix.weights[1] == pytest.approx(tails[0] / tails[1], rel=1e-4)


# -- constraint realization on the linear plant ---------------------------------

def linear_push(sc, noise: TrajectoryNoise) -> np.ndarray:
    """Deviation from nominal through the linear LQG recursion, vectorized over samples."""
    A, B, H = sc.plant.A, sc.plant.B, sc.plant.H
    L, K = sc.gains.L, sc.gains.K
    e = noise.init.copy()
    xh = np.zeros_like(e)
    out = [e]
    for s in range(sc.T):
        ub = xh @ L[s].T
        e = e @ A[s].T + (ub + noise.ctrl[:, s]) @ B[s].T + noise.proc[:, s]
        pred = xh @ A[s].T + ub @ B[s].T
        xh = pred + (noise.meas[:, s] + (e - pred) @ H[s].T) @ K[s].T
        out.append(e)
    return np.stack(out, axis=1)


@pytest.mark.parametrize("covariance", ["mean_shift", "optimize"])
def test_components_realize_their_constraint(linear_scenario, linear_modes, covariance):
    sc = linear_scenario
    n = 100_000
    for d, mode in enumerate(linear_modes[:2]):
        comp = optimize_component(mode, sc.design, sc.noise, covariance=covariance)
        assert comp.residual < 1e-8
        rng = np.random.default_rng(100 + d)
        z = TrajectoryNoise.from_flat(rng.standard_normal((n, sc.noise.layout.size)), sc.noise.layout)
        dev = linear_push(sc, comp.spec.transform(z))[:, mode.t]
        target = mode.x_obs - sc.nominal.states[mode.t]
        se = dev.std(axis=0, ddof=1) / math.sqrt(n)
        assert np.all(np.abs(dev.mean(axis=0) - target) <= 3 * se)
        if covariance == "optimize":
            assert comp.objective_value <= comp.initial_objective + 1e-3
        else:
            assert comp.objective_value == comp.initial_objective
