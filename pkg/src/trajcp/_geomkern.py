"""Compiled convex-geometry kernels.

Shapes are passed as a packed tuple of arrays (see ``geometry.pack_shapes``):

    0 kind     int64[n]      0 sphere, 1 polytope
    1 core     f8[n, 3]      sphere center (body frame)
    2 skin     f8[n]         sphere radius, 0 for polytopes
    3 bcenter  f8[n, 3]      bounding-sphere center (body frame)
    4 brad     f8[n]         bounding-sphere radius
    5 circ     f8[n]         max distance of any shape point from the body origin
    6 voff     int64[n + 1]  vertex offsets into ``verts``
    7 verts    f8[m, 3]
    8 foff     int64[n + 1]  offsets into ``fnorm`` (outward unit face normals)
    9 fnorm    f8[k, 3]
    10 eoff    int64[n + 1]  offsets into ``edir`` (unit edge directions)
    11 edir    f8[e, 3]

Spheres are handled as a point core inflated by ``skin``; separation between
cores comes from GJK, penetration from a separating-axis search over face
normals and edge cross products, which is exact for polytopes.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

GJK_MAX_ITER = 256
STATUS_SEPARATED = 0
STATUS_INTERSECT = 1
STATUS_NO_CONVERGENCE = 2


@njit(cache=True)
def quat_to_mat(q, R):
    w, x, y, z = q[0], q[1], q[2], q[3]
    R[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[0, 1] = 2.0 * (x * y - w * z)
    R[0, 2] = 2.0 * (x * z + w * y)
    R[1, 0] = 2.0 * (x * y + w * z)
    R[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[1, 2] = 2.0 * (y * z - w * x)
    R[2, 0] = 2.0 * (x * z - w * y)
    R[2, 1] = 2.0 * (y * z + w * x)
    R[2, 2] = 1.0 - 2.0 * (x * x + y * y)


@njit(cache=True)
def quat_angle(q0, q1):
    """Rotation angle of the shortest arc between two unit quaternions."""
    c = abs(q0[0] * q1[0] + q0[1] * q1[1] + q0[2] * q1[2] + q0[3] * q1[3])
    if c > 1.0:
        c = 1.0
    return 2.0 * math.acos(c)


@njit(cache=True)
def slerp(q0, q1, lam, out):
    c = q0[0] * q1[0] + q0[1] * q1[1] + q0[2] * q1[2] + q0[3] * q1[3]
    sgn = 1.0
    if c < 0.0:
        c = -c
        sgn = -1.0
    if c > 1.0 - 1e-12:
        w0 = 1.0 - lam
        w1 = lam
    else:
        th = math.acos(c)
        s = math.sin(th)
        w0 = math.sin((1.0 - lam) * th) / s
        w1 = math.sin(lam * th) / s
    nrm = 0.0
    for k in range(4):
        out[k] = w0 * q0[k] + sgn * w1 * q1[k]
        nrm += out[k] * out[k]
    nrm = math.sqrt(nrm)
    for k in range(4):
        out[k] /= nrm


@njit(cache=True)
def _support(S, s, R, t, d, out):
    """Support point of the core of shape ``s`` posed at (R, t) along world ``d``."""
    dl0 = R[0, 0] * d[0] + R[1, 0] * d[1] + R[2, 0] * d[2]
    dl1 = R[0, 1] * d[0] + R[1, 1] * d[1] + R[2, 1] * d[2]
    dl2 = R[0, 2] * d[0] + R[1, 2] * d[1] + R[2, 2] * d[2]
    if S[0][s] == 0:
        p0 = S[1][s, 0]
        p1 = S[1][s, 1]
        p2 = S[1][s, 2]
    else:
        verts = S[7]
        best = -np.inf
        bi = S[6][s]
        for k in range(S[6][s], S[6][s + 1]):
            v = verts[k, 0] * dl0 + verts[k, 1] * dl1 + verts[k, 2] * dl2
            if v > best:
                best = v
                bi = k
        p0 = verts[bi, 0]
        p1 = verts[bi, 1]
        p2 = verts[bi, 2]
    for r in range(3):
        out[r] = R[r, 0] * p0 + R[r, 1] * p1 + R[r, 2] * p2 + t[r]


@njit(cache=True)
def _world_point(R, t, p, out):
    for r in range(3):
        out[r] = R[r, 0] * p[0] + R[r, 1] * p[1] + R[r, 2] * p[2] + t[r]


@njit(cache=True)
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True)
def _det3(a00, a01, a02, a10, a11, a12, a20, a21, a22):
    return a00 * (a11 * a22 - a12 * a21) - a01 * (a10 * a22 - a12 * a20) + a02 * (a10 * a21 - a11 * a20)


@njit(cache=True)
def _solve_subset(W, idx, m, lam):
    """Closest point to the origin on the affine hull of ``W[idx[:m]]``.

    Fills ``lam[:m]`` with barycentric coordinates; returns False when the
    subset is affinely degenerate.
    """
    if m == 1:
        lam[0] = 1.0
        return True
    i0 = idx[0]
    p0 = W[i0, 0]
    p1 = W[i0, 1]
    p2 = W[i0, 2]
    if m == 2:
        e0 = W[idx[1], 0] - p0
        e1 = W[idx[1], 1] - p1
        e2 = W[idx[1], 2] - p2
        den = e0 * e0 + e1 * e1 + e2 * e2
        if den < 1e-30:
            return False
        mu = -(e0 * p0 + e1 * p1 + e2 * p2) / den
        lam[0] = 1.0 - mu
        lam[1] = mu
        return True
    a0 = W[idx[1], 0] - p0
    a1 = W[idx[1], 1] - p1
    a2 = W[idx[1], 2] - p2
    b0 = W[idx[2], 0] - p0
    b1 = W[idx[2], 1] - p1
    b2 = W[idx[2], 2] - p2
    gaa = a0 * a0 + a1 * a1 + a2 * a2
    gab = a0 * b0 + a1 * b1 + a2 * b2
    gbb = b0 * b0 + b1 * b1 + b2 * b2
    ra = -(a0 * p0 + a1 * p1 + a2 * p2)
    rb = -(b0 * p0 + b1 * p1 + b2 * p2)
    if m == 3:
        det = gaa * gbb - gab * gab
        if det <= 1e-12 * gaa * gbb or det <= 1e-60:
            return False
        mu0 = (ra * gbb - gab * rb) / det
        mu1 = (gaa * rb - ra * gab) / det
        lam[0] = 1.0 - mu0 - mu1
        lam[1] = mu0
        lam[2] = mu1
        return True
    c0 = W[idx[3], 0] - p0
    c1 = W[idx[3], 1] - p1
    c2 = W[idx[3], 2] - p2
    gac = a0 * c0 + a1 * c1 + a2 * c2
    gbc = b0 * c0 + b1 * c1 + b2 * c2
    gcc = c0 * c0 + c1 * c1 + c2 * c2
    rc = -(c0 * p0 + c1 * p1 + c2 * p2)
    det = _det3(gaa, gab, gac, gab, gbb, gbc, gac, gbc, gcc)
    if det <= 1e-12 * gaa * gbb * gcc or det <= 1e-90:
        return False
    mu0 = _det3(ra, gab, gac, rb, gbb, gbc, rc, gbc, gcc) / det
    mu1 = _det3(gaa, ra, gac, gab, rb, gbc, gac, rc, gcc) / det
    mu2 = _det3(gaa, gab, ra, gab, gbb, rb, gac, gbc, rc) / det
    lam[0] = 1.0 - mu0 - mu1 - mu2
    lam[1] = mu0
    lam[2] = mu1
    lam[3] = mu2
    return True


@njit(cache=True)
def _popcount(mask):
    c = 0
    while mask:
        c += mask & 1
        mask >>= 1
    return c


@njit(cache=True)
def _closest_on_simplex(W, n, lam_out, idx, lam):
    """Closest point of conv(W[:n]) to the origin by subset enumeration.

    Returns the bitmask of the supporting subset; ``lam_out`` holds the
    barycentric weights indexed like ``W``. ``idx`` and ``lam`` are scratch.
    """
    best = np.inf
    best_mask = 0
    # visit subsets by increasing size so ties keep the smaller support
    for size in range(1, n + 1):
        for mask in range(1, 1 << n):
            if _popcount(mask) != size:
                continue
            m = 0
            for k in range(n):
                if mask & (1 << k):
                    idx[m] = k
                    m += 1
            if not _solve_subset(W, idx, m, lam):
                continue
            ok = True
            for k in range(m):
                if lam[k] < -1e-12:
                    ok = False
                    break
            if not ok:
                continue
            p0 = 0.0
            p1 = 0.0
            p2 = 0.0
            for k in range(m):
                p0 += lam[k] * W[idx[k], 0]
                p1 += lam[k] * W[idx[k], 1]
                p2 += lam[k] * W[idx[k], 2]
            nn = p0 * p0 + p1 * p1 + p2 * p2
            if nn < best * (1.0 - 1e-12):
                best = nn
                best_mask = mask
                for k in range(4):
                    lam_out[k] = 0.0
                for k in range(m):
                    lam_out[idx[k]] = max(lam[k], 0.0)
    return best_mask


@njit(cache=True)
def gjk(SA, a, Ra, ta, SB, b, Rb, tb, pa_out, pb_out):
    """Distance between the cores of two posed shapes.

    Returns ``(distance, status)``; on separation ``pa_out``/``pb_out`` hold
    the closest core points.
    """
    F = np.empty((19, 3))
    W = F[0:4]
    PA = F[4:8]
    PB = F[8:12]
    d = F[12]
    nd = F[13]
    pa = F[14]
    pb = F[15]
    ca = F[16]
    cb = F[17]
    v = F[18]
    lam = np.zeros(8)
    lam_s = lam[4:8]
    idx = np.empty(4, dtype=np.int64)
    _world_point(Ra, ta, SA[3][a], ca)
    _world_point(Rb, tb, SB[3][b], cb)
    for r in range(3):
        d[r] = ca[r] - cb[r]
    if _dot(d, d) < 1e-24:
        d[0] = 1.0
        d[1] = 0.0
        d[2] = 0.0
    for r in range(3):
        nd[r] = -d[r]
    _support(SA, a, Ra, ta, nd, pa)
    _support(SB, b, Rb, tb, d, pb)
    for r in range(3):
        W[0, r] = pa[r] - pb[r]
        PA[0, r] = pa[r]
        PB[0, r] = pb[r]
    n = 1
    lam[0] = 1.0
    for r in range(3):
        v[r] = W[0, r]
    vv = _dot(v, v)
    status = STATUS_NO_CONVERGENCE
    for _ in range(GJK_MAX_ITER):
        if vv < 1e-24:
            status = STATUS_INTERSECT
            break
        for r in range(3):
            nd[r] = -v[r]
        _support(SA, a, Ra, ta, nd, pa)
        _support(SB, b, Rb, tb, v, pb)
        w0 = pa[0] - pb[0]
        w1 = pa[1] - pb[1]
        w2 = pa[2] - pb[2]
        vw = v[0] * w0 + v[1] * w1 + v[2] * w2
        if vv - vw <= 1e-12 * vv + 1e-24:
            status = STATUS_SEPARATED
            break
        dup = False
        for k in range(n):
            dx = W[k, 0] - w0
            dy = W[k, 1] - w1
            dz = W[k, 2] - w2
            if dx * dx + dy * dy + dz * dz < 1e-26:
                dup = True
        if dup:
            status = STATUS_SEPARATED
            break
        W[n, 0] = w0
        W[n, 1] = w1
        W[n, 2] = w2
        for r in range(3):
            PA[n, r] = pa[r]
            PB[n, r] = pb[r]
        n += 1
        mask = _closest_on_simplex(W, n, lam, idx, lam_s)
        if mask == 0:
            status = STATUS_SEPARATED
            break
        # compact the simplex onto the supporting subset
        m = 0
        for k in range(n):
            if mask & (1 << k):
                for r in range(3):
                    W[m, r] = W[k, r]
                    PA[m, r] = PA[k, r]
                    PB[m, r] = PB[k, r]
                lam[m] = lam[k]
                m += 1
        n = m
        for r in range(3):
            v[r] = 0.0
            for k in range(n):
                v[r] += lam[k] * W[k, r]
        new_vv = _dot(v, v)
        if n == 4:
            status = STATUS_INTERSECT
            vv = 0.0
            break
        if new_vv >= vv * (1.0 - 1e-14) and new_vv > 1e-24:
            vv = min(vv, new_vv)
            status = STATUS_SEPARATED
            break
        vv = new_vv
    for r in range(3):
        pa_out[r] = 0.0
        pb_out[r] = 0.0
        for k in range(n):
            pa_out[r] += lam[k] * PA[k, r]
            pb_out[r] += lam[k] * PB[k, r]
    if status == STATUS_INTERSECT:
        return 0.0, status
    return math.sqrt(vv), status


@njit(cache=True)
def _posed_vertices(S, s, R, t):
    lo = S[6][s]
    hi = S[6][s + 1]
    V = np.empty((hi - lo, 3))
    for k in range(lo, hi):
        _world_point(R, t, S[7][k], V[k - lo])
    return V


@njit(cache=True)
def _extent(V, n):
    """(min, max) of the projections of the rows of V onto n."""
    lo = np.inf
    hi = -np.inf
    for k in range(V.shape[0]):
        p = V[k, 0] * n[0] + V[k, 1] * n[1] + V[k, 2] * n[2]
        if p < lo:
            lo = p
        if p > hi:
            hi = p
    return lo, hi


@njit(cache=True)
def _rotate(R, v, out):
    for r in range(3):
        out[r] = R[r, 0] * v[0] + R[r, 1] * v[1] + R[r, 2] * v[2]


@njit(cache=True)
def _sat_axis(VA, VB, n, best, axis):
    loA, hiA = _extent(VA, n)
    loB, hiB = _extent(VB, n)
    s1 = hiA - loB
    s2 = hiB - loA
    if s1 < best:
        best = s1
        for r in range(3):
            axis[r] = n[r]
    if s2 < best:
        best = s2
        for r in range(3):
            axis[r] = -n[r]
    return best


@njit(cache=True)
def sat_depth(SA, a, Ra, ta, SB, b, Rb, tb, axis):
    """Penetration depth of two overlapping posed polytopes.

    ``axis`` receives the unit direction pointing from A into B.
    """
    VA = _posed_vertices(SA, a, Ra, ta)
    VB = _posed_vertices(SB, b, Rb, tb)
    n = np.empty(3)
    ea = np.empty(3)
    eb = np.empty(3)
    best = np.inf
    for k in range(SA[8][a], SA[8][a + 1]):
        _rotate(Ra, SA[9][k], n)
        best = _sat_axis(VA, VB, n, best, axis)
    for k in range(SB[8][b], SB[8][b + 1]):
        _rotate(Rb, SB[9][k], n)
        best = _sat_axis(VA, VB, n, best, axis)
    for k in range(SA[10][a], SA[10][a + 1]):
        _rotate(Ra, SA[11][k], ea)
        for l in range(SB[10][b], SB[10][b + 1]):
            _rotate(Rb, SB[11][l], eb)
            n[0] = ea[1] * eb[2] - ea[2] * eb[1]
            n[1] = ea[2] * eb[0] - ea[0] * eb[2]
            n[2] = ea[0] * eb[1] - ea[1] * eb[0]
            nn = math.sqrt(_dot(n, n))
            if nn < 1e-9:
                continue
            for r in range(3):
                n[r] /= nn
            best = _sat_axis(VA, VB, n, best, axis)
    return best


@njit(cache=True)
def _point_depth(c, S, s, R, t, normal):
    """Depth of point ``c`` inside posed polytope ``s`` and the nearest face normal."""
    V = _posed_vertices(S, s, R, t)
    n = np.empty(3)
    best = np.inf
    for k in range(S[8][s], S[8][s + 1]):
        _rotate(R, S[9][k], n)
        lo, hi = _extent(V, n)
        dep = hi - _dot(n, c)
        if dep < best:
            best = dep
            for r in range(3):
                normal[r] = n[r]
    return best


@njit(cache=True)
def signed_distance_kernel(SA, a, Ra, ta, SB, b, Rb, tb, pa, pb):
    """Signed distance between posed shapes; negative means penetration depth.

    Returns ``(d, status)``; ``pa``/``pb`` receive witness points on A and B.
    """
    dist, status = gjk(SA, a, Ra, ta, SB, b, Rb, tb, pa, pb)
    if status == STATUS_NO_CONVERGENCE:
        return np.nan, status
    rA = SA[2][a]
    rB = SB[2][b]
    n = np.empty(3)
    if status == STATUS_SEPARATED and dist > 0.0:
        for r in range(3):
            n[r] = (pb[r] - pa[r]) / dist
            pa[r] += rA * n[r]
            pb[r] -= rB * n[r]
        return dist - rA - rB, STATUS_SEPARATED
    kA = SA[0][a]
    kB = SB[0][b]
    if kA == 0 and kB == 0:
        depth = 0.0
        n[0] = 1.0
        n[1] = 0.0
        n[2] = 0.0
    elif kA == 0:
        # sphere core inside polytope B; push A out along the face normal
        depth = _point_depth(pa, SB, b, Rb, tb, n)
        for r in range(3):
            n[r] = -n[r]
    elif kB == 0:
        depth = _point_depth(pb, SA, a, Ra, ta, n)
    else:
        depth = sat_depth(SA, a, Ra, ta, SB, b, Rb, tb, n)
    # n points from A into B
    nn = np.empty(3)
    for r in range(3):
        nn[r] = -n[r]
    if kA == 0:
        _world_point(Ra, ta, SA[1][a], pa)
        for r in range(3):
            pa[r] += rA * n[r]
    else:
        _support(SA, a, Ra, ta, n, pa)
    if kB == 0:
        _world_point(Rb, tb, SB[1][b], pb)
        for r in range(3):
            pb[r] -= rB * n[r]
    else:
        _support(SB, b, Rb, tb, nn, pb)
    return -depth - rA - rB, STATUS_INTERSECT


@njit(cache=True)
def separation_kernel(SA, a, Ra, ta, SB, b, Rb, tb):
    """Separation distance; any value <= 0 only certifies contact (no depth)."""
    pa = np.empty(3)
    pb = np.empty(3)
    dist, status = gjk(SA, a, Ra, ta, SB, b, Rb, tb, pa, pb)
    if status == STATUS_NO_CONVERGENCE:
        return np.nan
    if status == STATUS_INTERSECT:
        return -(SA[2][a] + SB[2][b])
    return dist - SA[2][a] - SB[2][b]


@njit(cache=True)
def face_offsets(S):
    """Support value h_f = max_v n_f . v for every packed face normal."""
    nf = S[9].shape[0]
    h = np.full(nf, -np.inf)
    for j in range(S[0].shape[0]):
        for f in range(S[8][j], S[8][j + 1]):
            nrm = S[9][f]
            for v in range(S[6][j], S[6][j + 1]):
                hv = nrm[0] * S[7][v, 0] + nrm[1] * S[7][v, 1] + nrm[2] * S[7][v, 2]
                if hv > h[f]:
                    h[f] = hv
    return h


@njit(cache=True)
def interval_lower_bound(c, dt, rot, r, S, j, h):
    """Lower bound on the distance from a moving ball to world-frame shape ``j``.

    The ball of radius ``r`` starts at ``c``, translates by ``dt`` and its
    center drifts by at most ``rot`` through rotation. Each supporting face
    plane only sees the motion along its normal, which keeps the bound tight
    when the ball slides past a large face. With ``dt = 0`` and ``rot = 0``
    this is a static point bound.
    """
    dx = c[0] - S[3][j, 0]
    dy = c[1] - S[3][j, 1]
    dz = c[2] - S[3][j, 2]
    move = math.sqrt(dt[0] * dt[0] + dt[1] * dt[1] + dt[2] * dt[2])
    lb = math.sqrt(dx * dx + dy * dy + dz * dz) - S[4][j] - move
    for f in range(S[8][j], S[8][j + 1]):
        nrm = S[9][f]
        s = nrm[0] * c[0] + nrm[1] * c[1] + nrm[2] * c[2] - h[f]
        s -= abs(nrm[0] * dt[0] + nrm[1] * dt[1] + nrm[2] * dt[2])
        if s > lb:
            lb = s
    if S[6][j + 1] > S[6][j]:
        lb -= S[2][j]
    return lb - r - rot


@njit(cache=True)
def swept_check(trans, quats, n, SR, SE, margin, d_floor):
    """Conservative-advancement check over the piecewise interpolated poses.

    A whole-robot sphere around the body origin first certifies runs of
    intervals as clear of each obstacle; the remaining (interval, part,
    obstacle) triples go through per-part conservative advancement.
    Returns ``(hit, t, i, j, min_distance)``; ``t`` is the step nearest the
    first contact found and ``min_distance`` is the smallest clearance or
    clearance bound evaluated along the way (a diagnostic, not a bound).
    """
    nparts = SR[0].shape[0]
    nobs = SE[0].shape[0]
    I3 = np.eye(3)
    zero = np.zeros(3)
    R0 = np.empty((3, 3))
    R = np.empty((3, 3))
    q = np.empty(4)
    tt = np.empty(3)
    c0 = np.empty(3)
    dmin = np.inf
    if n == 1:
        quat_to_mat(quats[0], R0)
        for i in range(nparts):
            for j in range(nobs):
                d = separation_kernel(SR, i, R0, trans[0], SE, j, I3, zero)
                if d < dmin:
                    dmin = d
                if not (d > margin):
                    return True, 0, i, j, dmin
        return False, -1, -1, -1, dmin
    rb = 0.0
    for i in range(nparts):
        if SR[5][i] > rb:
            rb = SR[5][i]
    h = face_offsets(SE)
    still = np.zeros(3)
    dt = np.empty(3)
    # the whole-robot sphere only translates, so its motion is the path length
    dtrs = np.empty(n - 1)
    cum = np.zeros(n)
    for k in range(n - 1):
        dtrs[k] = math.sqrt(
            (trans[k + 1, 0] - trans[k, 0]) ** 2
            + (trans[k + 1, 1] - trans[k, 1]) ** 2
            + (trans[k + 1, 2] - trans[k, 2]) ** 2
        )
        cum[k + 1] = cum[k] + dtrs[k]
    clear_until = np.full(nobs, -1, dtype=np.int64)
    skip = np.zeros(nobs, dtype=np.bool_)
    for k in range(n - 1):
        for r in range(3):
            dt[r] = trans[k + 1, r] - trans[k, r]
        for j in range(nobs):
            skip[j] = False
            if k <= clear_until[j]:
                skip[j] = True
                continue
            D = interval_lower_bound(trans[k], still, 0.0, rb, SE, j, h)
            k2 = k - 1
            while k2 + 1 < n - 1 and cum[k2 + 2] - cum[k] < D - margin:
                k2 += 1
            if k2 >= k:
                clear_until[j] = k2
                skip[j] = True
                lower = D - (cum[k2 + 1] - cum[k])
            else:
                lower = interval_lower_bound(trans[k], dt, 0.0, rb, SE, j, h)
                skip[j] = lower > margin
            if skip[j] and lower < dmin:
                dmin = lower
        quat_to_mat(quats[k], R0)
        ang = quat_angle(quats[k], quats[k + 1])
        dtr = dtrs[k]
        for i in range(nparts):
            motion = dtr + ang * SR[5][i]
            _world_point(R0, trans[k], SR[3][i], c0)
            arm = math.sqrt(SR[3][i, 0] ** 2 + SR[3][i, 1] ** 2 + SR[3][i, 2] ** 2)
            for j in range(nobs):
                if skip[j]:
                    continue
                lower = interval_lower_bound(c0, dt, ang * arm, SR[4][i], SE, j, h)
                if lower > margin:
                    if lower < dmin:
                        dmin = lower
                    continue
                lam = 0.0
                for _ in range(1000000):
                    slerp(quats[k], quats[k + 1], lam, q)
                    quat_to_mat(q, R)
                    for r in range(3):
                        tt[r] = trans[k, r] + lam * (trans[k + 1, r] - trans[k, r])
                    d = separation_kernel(SR, i, R, tt, SE, j, I3, zero)
                    if d < dmin:
                        dmin = d
                    if not (d > margin):
                        step = k + 1 if lam >= 0.5 else k
                        return True, step, i, j, dmin
                    if lam >= 1.0 or motion <= 0.0:
                        break
                    adv = d - margin
                    if adv < d_floor:
                        adv = d_floor
                    lam = min(1.0, lam + adv / motion)
    return False, -1, -1, -1, dmin
