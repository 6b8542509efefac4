"""Gaussian primitives and the joint distribution of trajectory noise.

The noise driving one closed-loop trajectory is the stacked vector

    X = (p0, vu_1, vx_1, w_1, ..., vu_T, vx_T, w_T)

with independent Gaussian blocks. Everything here works in log space; a
T=100 joint density underflows double precision long before it is useful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)
GROUPS = ("ctrl", "proc", "meas")


class DimensionError(ValueError):
    pass


@njit(cache=True)
def _affine_steps(mean, M, X):
    """out[n, t] = mean[t] + M[t] @ X[n, t] for lower-triangular M."""
    n, T, d = X.shape
    out = np.empty((n, T, d))
    for s in range(n):
        for t in range(T):
            for i in range(d):
                acc = mean[t, i]
                for j in range(i + 1):
                    acc += M[t, i, j] * X[s, t, j]
                out[s, t, i] = acc
    return out


@njit(cache=True)
def _whitened_sq(mean, Minv, X):
    """sum_t |Minv[t] (X[n, t] - mean[t])|^2 for lower-triangular Minv."""
    n, T, d = X.shape
    out = np.zeros(n)
    for s in range(n):
        acc = 0.0
        for t in range(T):
            for i in range(d):
                z = 0.0
                for j in range(i + 1):
                    z += Minv[t, i, j] * (X[s, t, j] - mean[t, j])
                acc += z * z
        out[s] = acc
    return out


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """Multivariate normal with a cached lower Cholesky factor.

    The arrays are read-only; build a new spec instead of mutating one.
    """

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(_frozen(self.mean))
        cov = np.atleast_2d(np.array(self.cov, dtype=float))
        n = mean.shape[0]
        if cov.shape != (n, n):
            raise DimensionError(f"covariance shape {cov.shape} does not match mean of length {n}")
        scale = max(np.abs(cov).max(), 1e-300)
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
        cov.setflags(write=False)
        chol.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def _degenerate(cls, mean) -> "GaussianSpec":
        # Zero covariance point mass; only meant for tests.
        obj = object.__new__(cls)
        mean = np.atleast_1d(_frozen(mean))
        z = np.zeros((mean.shape[0], mean.shape[0]))
        z.setflags(write=False)
        object.__setattr__(obj, "mean", mean)
        object.__setattr__(obj, "cov", z)
        object.__setattr__(obj, "chol", z)
        return obj

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def log_norm(self) -> float:
        """log of the normalizing constant, 0.5*log|2*pi*cov|."""
        return 0.5 * self.dim * LOG_2PI + float(np.log(np.diag(self.chol)).sum())


def log_density(spec: GaussianSpec, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != spec.mean.shape:
        raise DimensionError(f"point of shape {x.shape} for a {spec.dim}-dimensional Gaussian")
    z = solve_triangular(spec.chol, x - spec.mean, lower=True)
    return float(-0.5 * z @ z - spec.log_norm)


def sample(spec: GaussianSpec, rng: np.random.Generator) -> np.ndarray:
    return spec.mean + spec.chol @ rng.standard_normal(spec.dim)


def mahalanobis(x, center, cov) -> float:
    """sqrt((x - center)^T cov^-1 (x - center))."""
    diff = np.atleast_1d(np.asarray(x, dtype=float) - np.asarray(center, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (diff.shape[0], diff.shape[0]):
        raise DimensionError("covariance and point dimensions disagree")
    try:
        chol = np.linalg.cholesky(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not positive definite") from None
    z = solve_triangular(chol, diff, lower=True)
    return float(math.sqrt(z @ z))


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index`` under master ``seed``.

    Counter-based: Philox keyed by the seed, with the sample index in the
    high counter word, so draws do not depend on evaluation order.
    """
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(index)]))


@dataclass(frozen=True)
class NoiseLayout:
    """Block dimensions of the stacked trajectory noise vector."""

    d0: int
    du: int
    dx: int
    dz: int
    T: int

    @property
    def step_dim(self) -> int:
        return self.du + self.dx + self.dz

    @property
    def size(self) -> int:
        return self.d0 + self.T * self.step_dim

    def group_dim(self, group: str) -> int:
        return {"ctrl": self.du, "proc": self.dx, "meas": self.dz}[group]

    def group_index(self, group: str) -> np.ndarray:
        """Flat-vector indices of a per-step group, shape (T, d)."""
        off = {"ctrl": 0, "proc": self.du, "meas": self.du + self.dx}[group]
        d = self.group_dim(group)
        starts = self.d0 + np.arange(self.T) * self.step_dim + off
        return starts[:, None] + np.arange(d)[None, :]

    def block_slices(self) -> list[slice]:
        """Slices of the 3T+1 blocks in stacking order."""
        out = [slice(0, self.d0)]
        for t in range(self.T):
            base = self.d0 + t * self.step_dim
            out.append(slice(base, base + self.du))
            out.append(slice(base + self.du, base + self.du + self.dx))
            out.append(slice(base + self.du + self.dx, base + self.step_dim))
        return out


@dataclass(frozen=True, eq=False)
class TrajectoryNoise:
    """One noise realization; ``ctrl``/``proc``/``meas`` have shape (T, d).

    A batch uses the same fields with a leading sample axis.
    """

    init: np.ndarray
    ctrl: np.ndarray
    proc: np.ndarray
    meas: np.ndarray

    @property
    def batched(self) -> bool:
        return self.init.ndim == 2

    def flat(self) -> np.ndarray:
        """Stack into the flat noise vector (or matrix, for batches)."""
        if self.batched:
            n = self.init.shape[0]
            steps = np.concatenate([self.ctrl, self.proc, self.meas], axis=2).reshape(n, -1)
            return np.concatenate([self.init, steps], axis=1)
        steps = np.concatenate([self.ctrl, self.proc, self.meas], axis=1).ravel()
        return np.concatenate([self.init, steps])

    @classmethod
    def from_flat(cls, x, layout: NoiseLayout) -> "TrajectoryNoise":
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        steps = x[..., layout.d0:].reshape(*lead, layout.T, layout.step_dim)
        du, dx = layout.du, layout.dx
        return cls(
            init=x[..., : layout.d0].copy(),
            ctrl=steps[..., :du].copy(),
            proc=steps[..., du : du + dx].copy(),
            meas=steps[..., du + dx :].copy(),
        )

    def sample(self, k: int) -> "TrajectoryNoise":
        """Row ``k`` of a batch."""
        return TrajectoryNoise(self.init[k], self.ctrl[k], self.proc[k], self.meas[k])


class TrajectoryNoiseSpec:
    """Independent Gaussian blocks for p0 and every (vu_t, vx_t, w_t).

    Per-step groups are also held as stacked arrays so batch densities are a
    handful of einsums rather than 3T+1 separate solves.
    """

    def __init__(self, init: GaussianSpec, per_step: Sequence[tuple[GaussianSpec, GaussianSpec, GaussianSpec]]):
        if not per_step:
            raise DimensionError("trajectory noise needs at least one step")
        self.init = init
        self.per_step = [tuple(triple) for triple in per_step]
        du, dx, dz = (g.dim for g in self.per_step[0])
        for t, triple in enumerate(self.per_step):
            if tuple(g.dim for g in triple) != (du, dx, dz):
                raise DimensionError(f"step {t + 1} block dimensions disagree with step 1")
        self.layout = NoiseLayout(init.dim, du, dx, dz, len(self.per_step))
        self._stack()

    def _stack(self):
        self._groups = {}
        for k, name in enumerate(GROUPS):
            specs = [triple[k] for triple in self.per_step]
            mean = np.stack([s.mean for s in specs])
            chol = np.stack([s.chol for s in specs])
            eye = np.eye(chol.shape[1])
            chol_inv = np.stack([solve_triangular(c, eye, lower=True) for c in chol])
            lognorm = np.array([s.log_norm for s in specs])
            self._groups[name] = (mean, chol, chol_inv, lognorm)
        ci = solve_triangular(self.init.chol, np.eye(self.init.dim), lower=True)
        self._init_inv = ci
        self._log_norm_total = self.init.log_norm + sum(g[3].sum() for g in self._groups.values())

    @classmethod
    def constant(cls, P0, Vu, Vx, W, T: int, d0_mean=None) -> "TrajectoryNoiseSpec":
        """Zero-mean nominal noise with the same covariances at every step."""
        P0 = np.atleast_2d(P0)
        init = GaussianSpec(np.zeros(P0.shape[0]) if d0_mean is None else d0_mean, P0)
        triple = tuple(GaussianSpec(np.zeros(np.atleast_2d(c).shape[0]), c) for c in (Vu, Vx, W))
        return cls(init, [triple] * T)

    @classmethod
    def from_blocks(cls, layout: NoiseLayout, means: np.ndarray, covs: Sequence[np.ndarray]) -> "TrajectoryNoiseSpec":
        """Build from a flat mean vector and the 3T+1 block covariances."""
        sl = layout.block_slices()
        blocks = [GaussianSpec(means[s], c) for s, c in zip(sl, covs)]
        steps = [tuple(blocks[1 + 3 * t : 4 + 3 * t]) for t in range(layout.T)]
        return cls(blocks[0], steps)

    @property
    def T(self) -> int:
        return self.layout.T

    def blocks(self) -> list[GaussianSpec]:
        out = [self.init]
        for triple in self.per_step:
            out.extend(triple)
        return out

    def mean_flat(self) -> np.ndarray:
        return np.concatenate([b.mean for b in self.blocks()])

    def covariances(self) -> list[np.ndarray]:
        return [b.cov for b in self.blocks()]

    def is_zero_mean(self) -> bool:
        return all(not np.any(b.mean) for b in self.blocks())

    def same_as(self, other: "TrajectoryNoiseSpec") -> bool:
        if self.layout != other.layout:
            return False
        return all(
            np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)
            for a, b in zip(self.blocks(), other.blocks())
        )

    def check(self, noise: TrajectoryNoise):
        L = self.layout
        lead = noise.init.shape[:-1]
        shapes = {
            "init": (noise.init.shape, (*lead, L.d0)),
            "ctrl": (noise.ctrl.shape, (*lead, L.T, L.du)),
            "proc": (noise.proc.shape, (*lead, L.T, L.dx)),
            "meas": (noise.meas.shape, (*lead, L.T, L.dz)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise DimensionError(f"noise block {name} has shape {got}, expected {want}")

    def transform(self, z: TrajectoryNoise) -> TrajectoryNoise:
        """Map standard-normal draws to this distribution (batched or not)."""
        out = {"init": self.init.mean + z.init @ self.init.chol.T}
        for name in GROUPS:
            mean, chol, _, _ = self._groups[name]
            zz = np.asarray(getattr(z, name), dtype=float)
            res = _affine_steps(mean, chol, np.ascontiguousarray(zz.reshape(-1, *zz.shape[-2:])))
            out[name] = res.reshape(zz.shape)
        return TrajectoryNoise(**out)

    def standard_draw(self, rng: np.random.Generator) -> TrajectoryNoise:
        L = self.layout
        return TrajectoryNoise(
            init=rng.standard_normal(L.d0),
            ctrl=rng.standard_normal((L.T, L.du)),
            proc=rng.standard_normal((L.T, L.dx)),
            meas=rng.standard_normal((L.T, L.dz)),
        )

    def sample(self, rng: np.random.Generator) -> TrajectoryNoise:
        return self.transform(self.standard_draw(rng))

    def log_density(self, noise: TrajectoryNoise):
        """Joint log-density; returns an array for batches."""
        self.check(noise)
        zi = (noise.init - self.init.mean) @ self._init_inv.T
        quad = np.sum(zi * zi, axis=-1)
        for name in GROUPS:
            mean, _, chol_inv, _ = self._groups[name]
            x = np.asarray(getattr(noise, name), dtype=float)
            sq = _whitened_sq(mean, chol_inv, np.ascontiguousarray(x.reshape(-1, *x.shape[-2:])))
            quad = quad + sq.reshape(x.shape[:-2])
        return -0.5 * quad - self._log_norm_total


def joint_log_density(spec: TrajectoryNoiseSpec, noise: TrajectoryNoise):
    return spec.log_density(noise)


def component_log_densities(components: Sequence[TrajectoryNoiseSpec], noise: TrajectoryNoise) -> np.ndarray:
    """Per-component joint log-densities, shape (..., D)."""
    return np.stack([c.log_density(noise) for c in components], axis=-1)


def mixture_log_density(components: Sequence[TrajectoryNoiseSpec], weights, noise: TrajectoryNoise):
    """log sum_d alpha_d q_d(noise); zero-weight components are skipped."""
    if len(components) == 0:
        raise ValueError("mixture needs at least one component")
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(components),):
        raise DimensionError("one weight per component is required")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("mixture weights must lie on the simplex")
    active = [d for d in range(len(components)) if weights[d] > 0]
    logs = component_log_densities([components[d] for d in active], noise)
    return logsumexp(logs + np.log(weights[active]), axis=-1)
