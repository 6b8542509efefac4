from __future__ import annotations

import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings
from scipy.optimize import minimize_scalar

from trajcp.closepoint import (
    ClosePointConfig,
    CollisionMode,
    DegenerateGradientError,
    NewtonConvergenceError,
    _dedup,
    close_points,
    newton_to_surface,
    refine_mahalanobis,
)


class Circle:
    """Signed distance to a disk of radius rho centred at o."""

    def __init__(self, o, rho):
        self.o = np.asarray(o, dtype=float)
        self.rho = rho

    def distance(self, x):
        return float(np.linalg.norm(x - self.o) - self.rho)

    def gradient(self, x):
        v = x - self.o
        return v / np.linalg.norm(v), False


class Plane:
    def __init__(self, n, c):
        self.n = np.asarray(n, dtype=float)
        self.c = c

    def distance(self, x):
        return float(self.c - self.n @ x)

    def gradient(self, x):
        return -self.n, False


def rotated_cov(s1, s2, phi):
    R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
    return R @ np.diag([s1**2, s2**2]) @ R.T


def circle_oracle(o, rho, Sigma):
    """Smallest Mahalanobis norm on the circle: 1-D search over the angle."""
    Si = np.linalg.inv(Sigma)

    def m2(th):
        x = o + rho * np.array([math.cos(th), math.sin(th)])
        return x @ Si @ x

    grid = np.linspace(0, 2 * math.pi, 4001)
    k = int(np.argmin([m2(t) for t in grid]))
    res = minimize_scalar(m2, bracket=(grid[k - 1], grid[k], grid[k + 1]), tol=1e-14)
    return math.sqrt(res.fun)


def test_newton_on_a_plane_is_exact():
    Sigma = np.array([[2.0, 0.5], [0.5, 1.0]])
    n = np.array([1.0, 1.0]) / math.sqrt(2)
    res = newton_to_surface(Plane(n, 3.0), np.zeros(2), Sigma)
    # the Sigma-scaled Newton step lands on the Mahalanobis-closest point of the plane
    assert res.distance == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(res.x, 3.0 * Sigma @ n / (n @ Sigma @ n))
    m = math.sqrt(res.x @ np.linalg.solve(Sigma, res.x))
    assert m == pytest.approx(3.0 / math.sqrt(n @ Sigma @ n))


def test_newton_errors():
    flat = Plane([0.0, 0.0], 1.0)
    with pytest.raises(DegenerateGradientError):
        newton_to_surface(flat, np.zeros(2), np.eye(2))

    class Oscillating:
        def distance(self, x):
            return 1.0 + 0.5 * math.sin(50 * x[0])

        def gradient(self, x):
            return np.array([1.0, 0.0]), False

    with pytest.raises(NewtonConvergenceError):
        newton_to_surface(Oscillating(), np.zeros(2), np.eye(2), max_iter=5)


ELLIPSE_FAMILY = [
    # (s1, s2, phi, o, rho)
    (1.0, 3.0, 0.3, (4.0, 1.0), 1.5),
    (0.5, 2.0, -0.7, (2.0, -3.0), 1.0),
    (2.0, 0.4, 1.2, (-3.0, 2.5), 0.8),
    (1.0, 1.0, 0.0, (3.0, 4.0), 2.0),
    (0.3, 3.0, 0.1, (2.0, 0.2), 1.5),
]


@pytest.mark.parametrize("s1, s2, phi, o, rho", ELLIPSE_FAMILY)
def test_refinement_reaches_tangent_ellipse(s1, s2, phi, o, rho):
    Sigma = rotated_cov(s1, s2, phi)
    surf = Circle(o, rho)
    x0 = newton_to_surface(surf, np.zeros(2), Sigma).x
    rr = refine_mahalanobis(surf, x0, np.zeros(2), Sigma, max_iter=2000)
    want = circle_oracle(np.asarray(o, float), rho, Sigma)
    assert math.sqrt(rr.m) == pytest.approx(want, abs=1e-4)
    assert abs(surf.distance(rr.x)) < 1e-6


def test_isotropic_circle_closed_form():
    o = np.array([3.0, 4.0])
    rr = refine_mahalanobis(Circle(o, 2.0), np.array([3.0, 2.0]), np.zeros(2), 0.25 * np.eye(2), max_iter=2000)
    assert math.sqrt(rr.m) == pytest.approx((5.0 - 2.0) / 0.5, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(
    s1=st.floats(0.2, 3.0), s2=st.floats(0.2, 3.0), phi=st.floats(-math.pi, math.pi),
    ang=st.floats(-math.pi, math.pi), dist=st.floats(2.0, 6.0), rho=st.floats(0.3, 1.5),
    gamma=st.sampled_from([0.25, 0.5, 1.0]),
)
def test_refinement_never_increases_and_stays_on_surface(s1, s2, phi, ang, dist, rho, gamma):
    Sigma = rotated_cov(s1, s2, phi)
    o = dist * np.array([math.cos(ang), math.sin(ang)])
    surf = Circle(o, rho)
    x0 = newton_to_surface(surf, np.zeros(2), Sigma).x
    m0 = x0 @ np.linalg.solve(Sigma, x0)
    rr = refine_mahalanobis(surf, x0, np.zeros(2), Sigma, gamma=gamma)
    assert rr.m <= m0 + 1e-12
    assert abs(surf.distance(rr.x)) < 1e-6
    # the reported value belongs to the returned point
    assert rr.m == pytest.approx(rr.x @ np.linalg.solve(Sigma, rr.x), rel=1e-12)
    assert math.sqrt(rr.m) >= circle_oracle(o, rho, Sigma) - 1e-9


def test_relative_tolerance_stops_early():
    Sigma = rotated_cov(0.3, 3.0, 0.1)
    surf = Circle((2.0, 0.2), 1.5)
    x0 = newton_to_surface(surf, np.zeros(2), Sigma).x
    full = refine_mahalanobis(surf, x0, np.zeros(2), Sigma, max_iter=2000)
    quick = refine_mahalanobis(surf, x0, np.zeros(2), Sigma, max_iter=2000, rtol=1e-2)
    assert quick.iterations < full.iterations
    assert full.m <= quick.m


def test_config_validation():
    with pytest.raises(ValueError):
        ClosePointConfig(kappa=0.0)
    with pytest.raises(ValueError):
        ClosePointConfig(gamma=1.5)
    with pytest.raises(ValueError):
        ClosePointConfig(eps=0.0)


def test_dedup_keeps_the_more_likely_mode():
    a = CollisionMode(3, 0, 0, np.array([1.0, 0.0]), 2.0)
    b = CollisionMode(4, 0, 0, np.array([1.0, 1e-5]), 1.5)
    c = CollisionMode(4, 1, 0, np.array([5.0, 0.0]), 3.0)
    kept = _dedup([a, b, c], 1e-3)
    assert kept == [b, c]


def test_linear_scenario_modes(linear_scenario, linear_modes):
    """The wall modes sit at y = 0.55 and the terminal one is the most likely."""
    assert [m.t for m in linear_modes[:3]] == [20, 19, 18]
    Sigma = linear_scenario.system.Sigma
    for m in linear_modes:
        assert m.x_obs[1] == pytest.approx(0.55, abs=1e-6)
        # half-space: the optimum is 0.55 / sqrt(Sigma_yy)
        assert m.maha == pytest.approx(0.55 / math.sqrt(Sigma[m.t][1, 1]), rel=1e-6)
    ranks = [m.sort_key() for m in linear_modes]
    assert ranks == sorted(ranks)


def test_airplane_refinement(airplane_modes):
    """Every mode is at least as likely after refinement; nearly all strictly."""
    assert len(airplane_modes) > 10
    reduced = [m.maha < m.maha_newton for m in airplane_modes]
    assert all(m.maha <= m.maha_newton + 1e-12 for m in airplane_modes)
    assert np.mean(reduced) >= 0.9
    names = {(m.part_name, m.obstacle_name) for m in airplane_modes[:4]}
    assert names <= {("left_wing", "left_building"), ("right_wing", "right_building")}


def test_close_points_skips_far_pairs(linear_scenario):
    sc = linear_scenario
    modes = close_points(sc.checker, sc.nominal.states, sc.system.Sigma, cfg=ClosePointConfig(kappa=0.5))
    assert modes == []
    top = close_points(sc.checker, sc.nominal.states, sc.system.Sigma, top=2)
    assert len(top) == 2 and top[0].t == 20
