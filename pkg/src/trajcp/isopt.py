"""Importance-sampling proposals built from collision modes.

Each mode (t, x_obs) becomes a Gaussian proposal over the raw trajectory
noise whose linearized closed loop has mean deviation x_obs - x*_t at step
t. Among such proposals we pick the one closest to the nominal noise in the
order-2 Renyi divergence, which for block-diagonal Gaussians reads

    sum_b  mu_b' (2 S_b - R_b)^-1 mu_b - 1/2 log(|2 S_b - R_b| |R_b| / |S_b|^2).

With S = R the problem is a least-norm solve; we start there and alternate
between the mean (closed form) and the covariances (preconditioned gradient
steps with backtracking).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .closepoint import CollisionMode
from .control import LinearDesign
from .gauss import TrajectoryNoiseSpec

log = logging.getLogger(__name__)


COVARIANCE_MODES = ("optimize", "mean_shift")


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


class Blocks:
    """Block-diagonal matrix stored as its diagonal blocks.

    Blocks of equal size are kept in stacked arrays so that factorizations
    run batched; a trajectory has only a handful of distinct block sizes.
    """

    def __init__(self, blocks: Sequence[np.ndarray] | None = None, *, _layout=None, _stacks=None):
        if _layout is not None:
            self.sizes, self.offsets, self.groups = _layout
            self.stacks = _stacks
            return
        blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
        self.sizes = [b.shape[0] for b in blocks]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.groups = []
        for k in sorted(set(self.sizes)):
            idx = np.array([n for n, s in enumerate(self.sizes) if s == k])
            pos = self.offsets[idx][:, None] + np.arange(k)[None, :]
            self.groups.append((k, idx, pos))
        self.stacks = [np.stack([blocks[n] for n in idx]) for _, idx, _ in self.groups]

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def __len__(self) -> int:
        return len(self.sizes)

    def like(self, stacks) -> "Blocks":
        return Blocks(_layout=(self.sizes, self.offsets, self.groups), _stacks=list(stacks))

    @property
    def blocks(self) -> list[np.ndarray]:
        out = [None] * len(self.sizes)
        for (_, idx, _), st in zip(self.groups, self.stacks):
            for n, b in zip(idx, st):
                out[n] = b
        return out

    def subset(self, keep: np.ndarray) -> "Blocks":
        blocks = self.blocks
        return Blocks([blocks[n] for n in np.flatnonzero(keep)])

    def positions(self, keep: np.ndarray) -> np.ndarray:
        """Vector indices covered by the kept blocks, in order."""
        return np.concatenate([np.arange(self.offsets[n], self.offsets[n + 1]) for n in np.flatnonzero(keep)])

    def gather(self, v: np.ndarray) -> list[np.ndarray]:
        return [v[pos] for _, _, pos in self.groups]

    def scatter(self, parts) -> np.ndarray:
        out = np.empty(self.size)
        for (_, _, pos), p in zip(self.groups, parts):
            out[pos] = p
        return out

    def matmul(self, M: np.ndarray) -> np.ndarray:
        out = np.empty(M.shape, dtype=float)
        for (_, _, pos), st in zip(self.groups, self.stacks):
            out[pos] = np.einsum("bij,bjc->bic", st, M[pos])
        return out

    def dense(self) -> np.ndarray:
        out = np.zeros((self.size, self.size))
        for (_, _, pos), st in zip(self.groups, self.stacks):
            for p, b in zip(pos, st):
                out[np.ix_(p, p)] = b
        return out


def _as_blocks(R) -> Blocks:
    if isinstance(R, Blocks):
        return R
    if isinstance(R, np.ndarray) and R.ndim == 2:
        return Blocks([R])
    return Blocks(R)


def _constrained_ls(C: np.ndarray, metric: Blocks, b: np.ndarray) -> np.ndarray:
    """argmin mu' metric^-1 mu  subject to  C mu = b."""
    MCt = metric.matmul(C.T)
    G = C @ MCt
    G = 0.5 * (G + G.T)
    try:
        chol = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError("C R C' is singular; the constraint cannot be met") from None
    d = np.diag(chol)
    if d.min() <= 1e-7 * d.max():
        raise RankDeficiencyError(f"C R C' is ill-conditioned (cond ~ {(d.max() / d.min()) ** 2:.1e})")
    y = np.linalg.solve(chol.T, np.linalg.solve(chol, b))
    return MCt @ y


def mean_shift_ls(C, R, b) -> np.ndarray:
    """Minimum R^-1-norm noise mean with C mu = b: mu = R C' (C R C')^-1 b."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    return _constrained_ls(C, _as_blocks(R), b)


def _logdiag(L) -> np.ndarray:
    return np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)


def renyi_objective(mu, S, R) -> float:
    """Order-2 Renyi divergence of N(0, R) from N(mu, S), summed over blocks.

    Returns +inf when some 2 S_b - R_b (or S_b) is not positive definite.
    """
    S = _as_blocks(S)
    R = _as_blocks(R)
    mu = np.asarray(mu, dtype=float).ravel()
    total = 0.0
    for Ss, Rs, m in zip(S.stacks, R.stacks, R.gather(mu)):
        try:
            LM = np.linalg.cholesky(2.0 * Ss - Rs)
            LS = np.linalg.cholesky(Ss)
            LR = np.linalg.cholesky(Rs)
        except np.linalg.LinAlgError:
            return math.inf
        z = np.linalg.solve(LM, m[..., None])[..., 0]
        logdet = 2.0 * (_logdiag(LM) + _logdiag(LR) - 2.0 * _logdiag(LS))
        total += float(np.sum(z * z) - 0.5 * logdet.sum())
    return total


def _gradient_S(mu, S: Blocks, R: Blocks) -> list[np.ndarray]:
    """d objective / d S_b = -2 M^-1 mu mu' M^-1 - M^-1 + S^-1 with M = 2 S - R."""
    out = []
    for Ss, Rs, m in zip(S.stacks, R.stacks, R.gather(mu)):
        Mi = np.linalg.inv(2.0 * Ss - Rs)
        v = np.einsum("bij,bj->bi", Mi, m)
        G = -2.0 * v[:, :, None] * v[:, None, :] - Mi + np.linalg.inv(Ss)
        out.append(0.5 * (G + np.swapaxes(G, 1, 2)))
    return out


@dataclass
class ProposalResult:
    mu: np.ndarray
    S: list[np.ndarray]
    objective: float
    initial_objective: float
    alternations: int
    history: list[float] = field(default_factory=list)


def optimize_proposal(C, R, b, tol: float = 1e-8, max_alternations: int = 50,
                      s_steps: int = 20) -> ProposalResult:
    """Block coordinate descent on (mu, S) from the mean-shift start (mu_LS, R).

    The S-step descends along -S G S (the gradient in the affine-invariant
    geometry of the positive definite cone, so the step does not shrink as
    S grows), halving the step until 2S - R stays positive definite and the
    objective drops by an Armijo fraction. Blocks whose columns of C are
    zero keep mu_b = 0 and S_b = R_b, which is optimal for them.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    R_full = _as_blocks(R)
    active = np.array([np.any(C[:, R_full.offsets[n]:R_full.offsets[n + 1]])
                       for n in range(len(R_full))])
    pos = R_full.positions(active)
    R = R_full.subset(active)
    Ca = C[:, pos]

    mu = _constrained_ls(Ca, R, b)
    S = R.like([st.copy() for st in R.stacks])
    f = renyi_objective(mu, S, R)
    history = [f]
    f0 = f
    tau = 1.0
    k = 0
    for k in range(1, max_alternations + 1):
        f_start = f
        # covariance steps with mu fixed
        for _ in range(s_steps):
            G = _gradient_S(mu, S, R)
            D = [-(Ss @ Gs @ Ss) for Ss, Gs in zip(S.stacks, G)]
            slope = float(sum(np.sum(Gs * Ds) for Gs, Ds in zip(G, D)))
            if slope > -1e-14:
                break
            tau = min(1.0, 2.0 * tau)
            ft = math.inf
            while tau > 1e-12:
                trial = S.like([Ss + tau * Ds for Ss, Ds in zip(S.stacks, D)])
                ft = renyi_objective(mu, trial, R)
                if ft <= f + 1e-4 * tau * slope:
                    break
                tau *= 0.5
            if not ft < f:
                break
            S, f_prev, f = trial, f, ft
            if f_prev - f < tol:
                break
        # mean step with S fixed: minimum (2S - R)^-1-norm solution
        M = S.like([2.0 * Ss - Rs for Ss, Rs in zip(S.stacks, R.stacks)])
        mu_new = _constrained_ls(Ca, M, b)
        f_new = renyi_objective(mu_new, S, R)
        if f_new <= f:
            mu, f = mu_new, f_new
        history.append(f)
        if f_start - f < tol:
            break

    mu_full = np.zeros(R_full.size)
    mu_full[pos] = mu
    S_full = R_full.blocks
    for n, Sb in zip(np.flatnonzero(active), S.blocks):
        S_full[n] = Sb
    return ProposalResult(mu_full, [s.copy() for s in S_full], f, f0, k, history)


@dataclass(eq=False)
class ComponentParams:
    spec: TrajectoryNoiseSpec
    mode: CollisionMode
    objective_value: float
    initial_objective: float
    residual: float

    def summary(self) -> dict:
        return {
            "t": self.mode.t, "part": self.mode.part_name or self.mode.part,
            "obstacle": self.mode.obstacle_name or self.mode.obstacle,
            "maha": self.mode.maha, "mean_norm": float(np.linalg.norm(self.spec.mean_flat())),
            "objective": self.objective_value, "objective_mean_shift": self.initial_objective,
        }


@dataclass(eq=False)
class MixtureSpec:
    """Proposal components followed by the nominal distribution as the last one."""

    components: list[ComponentParams]
    nominal: TrajectoryNoiseSpec
    weights: np.ndarray
    defensive_floor: float = 0.1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(self.components) + 1,):
            raise ValueError("one weight per component plus the nominal one is required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        if not 0.0 <= self.defensive_floor < 1.0:
            raise ValueError("defensive floor must lie in [0, 1)")
        if self.weights[-1] < self.defensive_floor - 1e-12:
            raise ValueError("nominal weight is below the defensive floor")

    @property
    def D(self) -> int:
        return len(self.components) + 1

    @property
    def specs(self) -> list[TrajectoryNoiseSpec]:
        return [c.spec for c in self.components] + [self.nominal]

    @classmethod
    def nominal_only(cls, nominal: TrajectoryNoiseSpec, defensive_floor: float = 0.0) -> "MixtureSpec":
        return cls([], nominal, np.ones(1), defensive_floor)


def optimize_component(mode: CollisionMode, design: LinearDesign, nominal: TrajectoryNoiseSpec,
                       tol: float = 1e-8, max_alternations: int = 50,
                       covariance: str = "optimize") -> ComponentParams:
    """Noise law for one collision mode.

    ``covariance="mean_shift"`` keeps S = R and only shifts the mean (the
    starting point of the alternation); ``"optimize"`` runs the full
    alternation over (mu, S).
    """
    if covariance not in COVARIANCE_MODES:
        raise ValueError(f"unknown covariance mode {covariance!r}")
    C = design.C(mode.t)
    b = mode.x_obs - design.nominal.states[mode.t]
    R = Blocks(nominal.covariances())
    res = optimize_proposal(C, R, b, tol, max_alternations if covariance == "optimize" else 0)
    residual = float(np.abs(C @ res.mu - b).max())
    for Sb, Rb in zip(res.S, R.blocks):
        np.linalg.cholesky(2.0 * Sb - Rb)  # raises if the divergence would be infinite
    spec = TrajectoryNoiseSpec.from_blocks(nominal.layout, res.mu, res.S)
    return ComponentParams(spec, mode, res.objective, res.initial_objective, residual)


def halfspace_weight(mode: CollisionMode, x_star, Sigma, gradient=None) -> float:
    """Gaussian probability of crossing the tangent half-space at x_obs.

    ``gradient`` is the distance gradient at x_obs; it points into free space,
    so the half-space normal is its negation. Without a usable gradient the
    tail probability of the Mahalanobis distance is returned.
    """
    delta = mode.x_obs - np.asarray(x_star, dtype=float)
    g = None if gradient is None else np.asarray(gradient, dtype=float)
    if g is None or not np.linalg.norm(g) > 0:
        return float(ndtr(-mode.maha))
    n = -g / np.linalg.norm(g)
    var = float(n @ Sigma @ n)
    if not var > 0:
        return float(ndtr(-mode.maha))
    return float(ndtr(-(n @ delta) / math.sqrt(var)))


def initial_weights(D: int, defensive_floor: float, alpha_defensive: float = 0.5,
                    halfspace: Sequence[float] | None = None) -> np.ndarray:
    """Initial simplex weights; the nominal (last) component gets
    max(defensive_floor, alpha_defensive) and the rest share the remainder
    uniformly or in proportion to ``halfspace``."""
    if D == 1:
        return np.ones(1)
    aD = max(defensive_floor, alpha_defensive)
    if halfspace is not None:
        h = np.asarray(halfspace, dtype=float)
        share = h / h.sum() if h.sum() > 0 else np.full(D - 1, 1.0 / (D - 1))
    else:
        share = np.full(D - 1, 1.0 / (D - 1))
    return np.append((1.0 - aD) * share, aD)


def build_mixture(modes: Sequence[CollisionMode], design: LinearDesign, nominal: TrajectoryNoiseSpec,
                  D: int = 10, defensive_floor: float = 0.1, weight_init: str = "uniform",
                  alpha_defensive: float = 0.5, checker=None, covariance: str = "optimize") -> MixtureSpec:
    """Components for the top D-1 modes plus the nominal distribution.

    Modes whose optimization fails are dropped, which shrinks D.
    ``checker`` supplies distance gradients for half-space weights.
    """
    if weight_init not in ("uniform", "halfspace"):
        raise ValueError(f"unknown weight_init {weight_init!r}")
    if D < 1:
        raise ValueError("component budget D must be at least 1")
    if len(modes) < D - 1:
        log.info("only %d modes available; shrinking D from %d to %d", len(modes), D, len(modes) + 1)
    comps: list[ComponentParams] = []
    hs: list[float] = []
    for mode in modes[: D - 1]:
        try:
            comp = optimize_component(mode, design, nominal, covariance=covariance)
        except np.linalg.LinAlgError as exc:
            log.warning("mode (t=%d, i=%d, j=%d) dropped: %s", mode.t, mode.part, mode.obstacle, exc)
            continue
        comps.append(comp)
        if weight_init == "halfspace":
            g = checker.gradient(mode.x_obs, mode.part, mode.obstacle)[0] if checker is not None else None
            hs.append(halfspace_weight(mode, design.nominal.states[mode.t], design.system.Sigma[mode.t], g))
    w = initial_weights(len(comps) + 1, defensive_floor, alpha_defensive,
                        hs if weight_init == "halfspace" else None)
    return MixtureSpec(comps, nominal, w, defensive_floor)
