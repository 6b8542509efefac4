from __future__ import annotations

import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import assume, given, settings
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from trajcp import _geomkern as gk
from trajcp.dynamics import LinearModel, Pose
from trajcp.geometry import (
    CollisionChecker,
    Environment,
    Polytope,
    RobotBody,
    Sphere,
    signed_distance,
)

ORIGIN = Pose.identity()


def posed(t, rotvec=(0.0, 0.0, 0.0)):
    q = Rotation.from_rotvec(rotvec).as_quat()  # x, y, z, w
    return Pose(np.asarray(t, dtype=float), np.array([q[3], q[0], q[1], q[2]]))


def random_polytope(rng, n=8, scale=1.0):
    return Polytope(scale * rng.standard_normal((n, 3)))


def world_vertices(P: Polytope, pose: Pose):
    return P.vertices @ pose.rotation_matrix().T + pose.translation


def hull_distance_oracle(VA, VB):
    """min |a - b| over the two convex hulls, by SLSQP on barycentric weights."""
    na, nb = len(VA), len(VB)

    def obj(w):
        d = w[:na] @ VA - w[na:] @ VB
        return d @ d

    cons = [{"type": "eq", "fun": lambda w: w[:na].sum() - 1}, {"type": "eq", "fun": lambda w: w[na:].sum() - 1}]
    best = math.inf
    for start in range(3):
        w0 = np.random.default_rng(start).dirichlet(np.ones(na + nb))
        w0[:na] /= w0[:na].sum()
        w0[na:] /= w0[na:].sum()
        res = minimize(obj, w0, method="SLSQP", bounds=[(0, 1)] * (na + nb), constraints=cons,
                       options={"ftol": 1e-14, "maxiter": 500})
        best = min(best, math.sqrt(max(res.fun, 0.0)))
    return best


def overlap_along(VA, VB, n):
    a, b = VA @ n, VB @ n
    return min(a.max() - b.min(), b.max() - a.min())


# -- closed forms ---------------------------------------------------------

@pytest.mark.parametrize("c2, want", [
    ([3.0, 0.0, 0.0], 1.0),
    ([1.5, 0.0, 0.0], -0.5),
    ([0.0, 0.0, 0.0], -2.0),
    ([2.0, 2.0, 2.0], math.sqrt(12) - 2.0),
])
def test_sphere_sphere(c2, want):
    a = Sphere(np.zeros(3), 1.0)
    b = Sphere(np.zeros(3), 1.0)
    c = signed_distance(a, ORIGIN, b, Pose.from_translation(c2))
    assert c.distance == pytest.approx(want, abs=1e-9)


def test_sphere_sphere_witness_points():
    c = signed_distance(Sphere(np.zeros(3), 0.5), ORIGIN, Sphere(np.zeros(3), 1.0), Pose.from_translation([0, 4, 0]))
    assert c.distance == pytest.approx(2.5, abs=1e-9)
    assert np.allclose(c.point_robot, [0, 0.5, 0], atol=1e-9)
    assert np.allclose(c.point_obstacle, [0, 3.0, 0], atol=1e-9)


@pytest.mark.parametrize("center, want", [
    ([3.0, 0.5, 0.5], 2.0 - 0.25),                            # face region
    ([2.0, 2.0, 0.5], math.sqrt(2.0) - 0.25),                 # edge region
    ([2.0, 2.0, 2.0], math.sqrt(3.0) - 0.25),                 # vertex region
    ([0.5, 0.5, 0.9], -(0.25 + 0.1)),                         # center inside, nearest face at distance 0.1
    ([1.1, 0.5, 0.5], -(0.25 - 0.1)),                         # center outside, overlapping
])
def test_sphere_box(center, want):
    box = Polytope.box([0, 0, 0], [1, 1, 1])
    d = signed_distance(Sphere(np.zeros(3), 0.25), Pose.from_translation(center), box).distance
    assert d == pytest.approx(want, abs=1e-9)


@pytest.mark.parametrize("shift, want", [
    ([2.5, 0.0, 0.0], 0.5),
    ([2.5, 2.5, 0.0], math.sqrt(0.5)),
    ([1.7, 0.0, 0.0], -0.3),
    ([0.0, 0.0, 1.9], -0.1),
])
def test_box_box_axis_aligned(shift, want):
    b = Polytope.box([-1, -1, -1], [1, 1, 1])
    assert signed_distance(b, Pose.from_translation(shift), b).distance == pytest.approx(want, abs=1e-9)


def test_rotated_box_corner():
    # a unit cube rotated 45 degrees about z presents an edge at x = sqrt(2)/2
    cube = Polytope.box([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])
    wall = Polytope.box([1.0, -5, -5], [2.0, 5, 5])
    d = signed_distance(cube, posed([0, 0, 0], [0, 0, math.pi / 4]), wall).distance
    assert d == pytest.approx(1.0 - math.sqrt(0.5), abs=1e-9)


def test_polytope_validation():
    with pytest.raises(ValueError):
        Polytope(np.zeros((3, 3)))
    with pytest.raises(ValueError, match="affinely"):
        Polytope([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    with pytest.raises(ValueError):
        Polytope.box([0, 0, 0], [1, 0, 1])
    with pytest.raises(ValueError):
        Sphere(np.zeros(3), 0.0)


# -- random polytopes against independent oracles --------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), gap=st.floats(0.5, 4.0))
def test_separation_matches_qp_oracle(seed, gap):
    rng = np.random.default_rng(seed)
    A, B = random_polytope(rng, 7), random_polytope(rng, 9)
    pa = posed(rng.standard_normal(3), rng.standard_normal(3))
    pb = posed(pa.translation + gap * 3 * rng.standard_normal(3), rng.standard_normal(3))
    VA, VB = world_vertices(A, pa), world_vertices(B, pb)
    oracle = hull_distance_oracle(VA, VB)
    assume(oracle > 1e-3)
    c = signed_distance(A, pa, B, pb)
    assert c.distance == pytest.approx(oracle, abs=1e-6)
    assert np.linalg.norm(c.point_robot - c.point_obstacle) == pytest.approx(c.distance, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_penetration_is_minimal_overlap(seed):
    """Depth equals the smallest projected overlap over all directions.

    The oracle samples directions, then polishes the best few with a
    derivative-free local search on the sphere.
    """
    rng = np.random.default_rng(seed)
    A, B = random_polytope(rng, 8), random_polytope(rng, 8)
    pa = posed(0.3 * rng.standard_normal(3), rng.standard_normal(3))
    pb = posed(0.3 * rng.standard_normal(3), rng.standard_normal(3))
    VA, VB = world_vertices(A, pa), world_vertices(B, pb)
    dirs = rng.standard_normal((5000, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    vals = np.array([overlap_along(VA, VB, n) for n in dirs])
    assume(vals.min() > 1e-3)
    best = vals.min()
    for n0 in dirs[np.argsort(vals)[:8]]:
        res = minimize(lambda v: overlap_along(VA, VB, v / np.linalg.norm(v)), n0, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
        best = min(best, res.fun)
    d = signed_distance(A, pa, B, pb).distance
    assert d < 0
    assert -d <= best + 1e-9
    assert -d == pytest.approx(best, rel=1e-4, abs=1e-6)


# -- distance gradient ------------------------------------------------------

def test_distance_gradient_finite_differences(airplane_scenario, rng):
    """The checker's gradient against a five-point stencil with a different step."""
    ch = airplane_scenario.checker
    xs = airplane_scenario.nominal.states
    worst = 0.0
    count = 0
    while count < 100:
        x = xs[rng.integers(30, 60)] + rng.normal(0, [1.0, 1.0, 1.0, 0.3, 0.1, 0.1, 0.2, 0.05])
        i, j = int(rng.integers(ch.nparts)), int(rng.integers(2))
        if ch.distance(x, i, j) <= 0.05:
            continue
        g, degenerate = ch.gradient(x, i, j)
        if degenerate:
            continue
        fd = np.empty(8)
        for k in range(8):
            h = 1e-4 * max(1.0, abs(x[k]))
            e = np.zeros(8)
            e[k] = h
            f = [ch.distance(x + s * e, i, j) for s in (2, 1, -1, -2)]
            fd[k] = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h)
        worst = max(worst, np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-8))
        count += 1
    assert worst < 1e-3


# -- swept checks -------------------------------------------------------------

def point_checker(radius=0.1, obstacles=None):
    obstacles = obstacles or [("wall", Polytope.box([1.0, -5, -5], [1.05, 5, 5]))]
    return CollisionChecker(LinearModel.translation(3), RobotBody([("ball", Sphere(np.zeros(3), radius))]),
                            Environment(obstacles))


def test_tunneling_is_caught_by_the_swept_check():
    ch = point_checker()
    states = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])  # endpoints on either side of a thin wall
    assert not ch.discrete(states)
    res = ch.swept(states)
    assert res.collided and res.first_hit == (0, 0, 0)


def test_swept_check_clear_path():
    ch = point_checker()
    res = ch.swept(np.array([[0.0, 0.0, 0.0], [0.5, 3.0, 0.0], [0.8, -3.0, 0.0]]))
    assert not res.collided
    assert res.min_distance == pytest.approx(1.0 - 0.8 - 0.1, abs=1e-6)


def test_swept_margin_and_domain_exit():
    ch = point_checker()
    states = np.array([[0.0, 0.0, 0.0], [0.85, 0.0, 0.0]])
    assert not ch.swept(states).collided
    assert ch.swept(states, margin=0.06).collided
    with pytest.raises(ValueError):
        ch.swept(states, margin=-1.0)
    assert ch.swept(states, domain_exit=True).domain_exit


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_swept_agrees_with_dense_sampling(seed):
    rng = np.random.default_rng(seed)
    ch = point_checker(0.2, [("a", Polytope.box([1, -1, -1], [2, 1, 1])), ("b", random_polytope(rng, 6, 0.5))])
    states = np.cumsum(rng.normal(0.3, 0.8, (4, 3)), axis=0)
    lam = np.linspace(0, 1, 400)[:, None]
    dense = np.concatenate([s + lam * (e - s) for s, e in zip(states[:-1], states[1:])])
    dmin = min(ch.distance(x, 0, j) for x in dense for j in range(2))
    res = ch.swept(states)
    if dmin < -1e-9:
        assert res.collided
    if res.collided:
        assert dmin < 2e-2  # a sampled point lies within the sampling resolution of contact
    else:
        assert res.min_distance > 0.0


def _dense_rotating(ch, trans, quats, n=200):
    q = np.empty(4)
    R = np.empty((3, 3))
    I = np.eye(3)
    z = np.zeros(3)
    out = math.inf
    for k in range(len(trans) - 1):
        for lam in np.linspace(0, 1, n):
            gk.slerp(quats[k], quats[k + 1], lam, q)
            gk.quat_to_mat(q, R)
            t = trans[k] + lam * (trans[k + 1] - trans[k])
            for i in range(ch.nparts):
                for j in range(ch.nobs):
                    out = min(out, gk.separation_kernel(ch.SR, i, R, t, ch.SE, j, I, z))
    return out


def test_swept_rotating_airplane_against_dense_reference(airplane_scenario):
    """Random airplane rollouts near the buildings: swept result versus dense slerp sampling."""
    from trajcp import _simkern as sk
    from trajcp.estimator import draw_noise

    sc = airplane_scenario
    ch = sc.checker
    noise, _ = draw_noise([sc.noise], [1.0], 4242, range(12))
    kind, prm, _, _, pidx = sc.model.kernel_args()
    agree = 0
    for k in range(12):
        X = sc.loop.rollout(noise.sample(k)).states[44:56]
        n = len(X)
        tr = np.empty((n, 3))
        qu = np.empty((n, 4))
        sk.poses_of_states(kind, prm, pidx, X, n, tr, qu)
        res = ch.swept(X)
        dense = _dense_rotating(ch, tr, qu)
        if dense < -1e-9:
            assert res.collided
        if res.collided:
            assert dense < 5e-3
        agree += 1
    assert agree == 12
