"""Compiled dynamics, closed-loop rollout and batch collision evaluation.

Models are identified by an integer kind so one kernel serves every plant:

    AIRPLANE  params = [g, rho, wing_area, mass, cd0, k_induced, alpha0, dt]
    LINEAR    x' = A x + B u with exact matrices; pose from selected state indices
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

from ._geomkern import quat_to_mat, signed_distance_kernel, swept_check

AIRPLANE = 0
LINEAR = 1

HALF_PI = 0.5 * math.pi


@njit(cache=True)
def airplane_derivative(x, u, prm, out):
    """Continuous-time airplane vector field; False outside the model domain."""
    g = prm[0]
    rho = prm[1]
    area = prm[2]
    mass = prm[3]
    cd0 = prm[4]
    kind = prm[5]
    v = x[3]
    psi = x[4]
    gam = x[5]
    phi = x[6]
    alpha = x[7]
    if not (v > 0.0) or not (abs(gam) < HALF_PI):
        return False
    q = rho * area * v * v
    lift = math.pi * q * alpha
    drag = q * (cd0 + 4.0 * math.pi * math.pi * kind * alpha * alpha)
    cg = math.cos(gam)
    out[0] = v * math.cos(psi) * cg
    out[1] = v * math.sin(psi) * cg
    out[2] = v * math.sin(gam)
    out[3] = u[0] - drag / mass - g * math.sin(gam)
    out[4] = -lift * math.sin(phi) / (mass * v * cg)
    out[5] = lift * math.cos(phi) / (mass * v) - g * cg / v
    out[6] = u[1]
    out[7] = u[2]
    return True


@njit(cache=True)
def airplane_rk4(x, u, prm, out):
    dt = prm[7]
    n = x.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    if not airplane_derivative(x, u, prm, k1):
        return False
    for r in range(n):
        tmp[r] = x[r] + 0.5 * dt * k1[r]
    if not airplane_derivative(tmp, u, prm, k2):
        return False
    for r in range(n):
        tmp[r] = x[r] + 0.5 * dt * k2[r]
    if not airplane_derivative(tmp, u, prm, k3):
        return False
    for r in range(n):
        tmp[r] = x[r] + dt * k3[r]
    if not airplane_derivative(tmp, u, prm, k4):
        return False
    for r in range(n):
        out[r] = x[r] + dt / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r])
    return True


@njit(cache=True)
def model_step(kind, prm, Am, Bm, x, u, out):
    if kind == AIRPLANE:
        return airplane_rk4(x, u, prm, out)
    for r in range(Am.shape[0]):
        acc = 0.0
        for c in range(Am.shape[1]):
            acc += Am[r, c] * x[c]
        for c in range(Bm.shape[1]):
            acc += Bm[r, c] * u[c]
        out[r] = acc
    return True


@njit(cache=True)
def euler_zyx_quat(yaw, pitch, roll, q):
    cy = math.cos(0.5 * yaw)
    sy = math.sin(0.5 * yaw)
    cp = math.cos(0.5 * pitch)
    sp = math.sin(0.5 * pitch)
    cr = math.cos(0.5 * roll)
    sr = math.sin(0.5 * roll)
    q[0] = cr * cp * cy + sr * sp * sy
    q[1] = sr * cp * cy - cr * sp * sy
    q[2] = cr * sp * cy + sr * cp * sy
    q[3] = cr * cp * sy - sr * sp * cy


@njit(cache=True)
def model_pose(kind, prm, pidx, x, trans, quat):
    if kind == AIRPLANE:
        trans[0] = x[0]
        trans[1] = x[1]
        trans[2] = x[2]
        euler_zyx_quat(x[4], prm[6] - x[7] - x[5], x[6], quat)
        return
    for k in range(3):
        trans[k] = x[pidx[k]] if pidx[k] >= 0 else 0.0
    quat[0] = 1.0
    quat[1] = 0.0
    quat[2] = 0.0
    quat[3] = 0.0


@njit(cache=True)
def rollout_kernel(kind, prm, Am, Bm, xs_nom, us_nom, L, K, A, B, H,
                   p0, vu, vx, w, X, Xhat, U):
    """Closed-loop LQG/EKF rollout on the true dynamics.

    Writes states ``X[0..T]``, deviation estimates ``Xhat[0..T]`` and applied
    controls ``U[0..T-1]``. Returns the number of valid states (T + 1 unless
    the dynamics left their domain).
    """
    T = us_nom.shape[0]
    dx = xs_nom.shape[1]
    du = us_nom.shape[1]
    dz = H.shape[1]
    ubar = np.empty(du)
    upert = np.empty(du)
    pred = np.empty(dx)
    innov = np.empty(dz)
    xnext = np.empty(dx)
    for r in range(dx):
        X[0, r] = xs_nom[0, r] + p0[r]
        Xhat[0, r] = 0.0
    for t in range(1, T + 1):
        s = t - 1
        for a in range(du):
            acc = 0.0
            for c in range(dx):
                acc += L[s, a, c] * Xhat[s, c]
            ubar[a] = acc
            U[s, a] = us_nom[s, a] + acc
            upert[a] = U[s, a] + vu[s, a]
        if not model_step(kind, prm, Am, Bm, X[s], upert, xnext):
            return t
        ok = True
        for r in range(dx):
            X[t, r] = xnext[r] + vx[s, r]
            if not np.isfinite(X[t, r]):
                ok = False
        if not ok:
            return t
        # prediction through the linearization, correction with the innovation
        for r in range(dx):
            acc = 0.0
            for c in range(dx):
                acc += A[s, r, c] * Xhat[s, c]
            for c in range(du):
                acc += B[s, r, c] * ubar[c]
            pred[r] = acc
        for a in range(dz):
            acc = w[s, a]
            for c in range(dx):
                acc += H[s, a, c] * (X[t, c] - xs_nom[t, c] - pred[c])
            innov[a] = acc
        for r in range(dx):
            acc = pred[r]
            for a in range(dz):
                acc += K[s, r, a] * innov[a]
            Xhat[t, r] = acc
    return T + 1


@njit(cache=True)
def poses_of_states(kind, prm, pidx, X, n, trans, quats):
    for t in range(n):
        model_pose(kind, prm, pidx, X[t], trans[t], quats[t])


@njit(parallel=True, cache=True)
def simulate_batch(kind, prm, Am, Bm, pidx, xs_nom, us_nom, L, K, A, B, H,
                   P0s, VU, VX, WW, SR, SE, margin, d_floor,
                   hit, domain_exit, first, dmin):
    """Evaluate the collision indicator for a batch of noise realizations."""
    N = P0s.shape[0]
    T = us_nom.shape[0]
    dx = xs_nom.shape[1]
    du = us_nom.shape[1]
    for s in prange(N):
        X = np.empty((T + 1, dx))
        Xhat = np.empty((T + 1, dx))
        U = np.empty((T, du))
        nv = rollout_kernel(kind, prm, Am, Bm, xs_nom, us_nom, L, K, A, B, H,
                            P0s[s], VU[s], VX[s], WW[s], X, Xhat, U)
        if nv < T + 1:
            domain_exit[s] = True
            hit[s] = True
            first[s, 0] = nv
            first[s, 1] = -1
            first[s, 2] = -1
            dmin[s] = np.nan
            continue
        domain_exit[s] = False
        trans = np.empty((nv, 3))
        quats = np.empty((nv, 4))
        poses_of_states(kind, prm, pidx, X, nv, trans, quats)
        h, tt, ii, jj, dm = swept_check(trans, quats, nv, SR, SE, margin, d_floor)
        hit[s] = h
        first[s, 0] = tt
        first[s, 1] = ii
        first[s, 2] = jj
        dmin[s] = dm


@njit(cache=True)
def state_pair_distance(kind, prm, pidx, x, SR, i, SE, j):
    """Signed distance between robot part i at state x and obstacle j."""
    t = np.empty(3)
    q = np.empty(4)
    R = np.empty((3, 3))
    pa = np.empty(3)
    pb = np.empty(3)
    model_pose(kind, prm, pidx, x, t, q)
    quat_to_mat(q, R)
    d, status = signed_distance_kernel(SR, i, R, t, SE, j, np.eye(3), np.zeros(3), pa, pb)
    return d


@njit(cache=True)
def state_pair_gradient(kind, prm, pidx, x, SR, i, SE, j, steps, fwd, bwd):
    """Central-difference gradient of the pair distance over state coordinates.

    ``fwd``/``bwd`` receive the one-sided quotients for degeneracy checks.
    Returns the distance at x.
    """
    n = x.shape[0]
    xp = x.copy()
    d0 = state_pair_distance(kind, prm, pidx, x, SR, i, SE, j)
    for k in range(n):
        h = steps[k]
        xp[k] = x[k] + h
        dp = state_pair_distance(kind, prm, pidx, xp, SR, i, SE, j)
        xp[k] = x[k] - h
        dm = state_pair_distance(kind, prm, pidx, xp, SR, i, SE, j)
        xp[k] = x[k]
        fwd[k] = (dp - d0) / h
        bwd[k] = (d0 - dm) / h
    return d0


@njit(cache=True)
def swept_states(kind, prm, pidx, X, n, SR, SE, margin, d_floor):
    trans = np.empty((n, 3))
    quats = np.empty((n, 4))
    poses_of_states(kind, prm, pidx, X, n, trans, quats)
    return swept_check(trans, quats, n, SR, SE, margin, d_floor)
