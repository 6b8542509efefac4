"""Likely collision modes: zero-distance states of small Mahalanobis distance.

For a (time step, robot part, obstacle) triple we first walk from the nominal
state onto the contact surface d_ij(q(x)) = 0 with Sigma-scaled Newton steps,
then slide along the surface to lower the Mahalanobis distance to the nominal
state, projecting back with the same Newton iteration after every step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.linalg import cho_factor, cho_solve

log = logging.getLogger(__name__)


class DegenerateGradientError(ArithmeticError):
    pass


class NewtonConvergenceError(RuntimeError):
    pass


class SurfaceFunction(Protocol):
    def distance(self, x: np.ndarray) -> float: ...

    def gradient(self, x: np.ndarray) -> tuple[np.ndarray, bool]: ...


class PairSurface:
    """d_ij over the state for one robot part / obstacle pair."""

    def __init__(self, checker, i: int, j: int):
        self.checker = checker
        self.i = i
        self.j = j

    def distance(self, x) -> float:
        return self.checker.distance(x, self.i, self.j)

    def gradient(self, x):
        return self.checker.gradient(x, self.i, self.j)


@dataclass(frozen=True)
class ClosePointConfig:
    kappa: float = 6.0
    gamma: float = 0.5
    eps_d: float = 1e-6
    eps: float = 1e-8
    dedup: float = 1e-3
    newton_max_iter: int = 100
    refine_max_iter: int = 200
    # Keep halving the step after a non-improving projection instead of
    # stopping the outer loop at the first one.
    continue_on_stall: bool = False
    jitter: float = 1e-6
    # Stop refining once an outer step lowers m by less than this fraction.
    rtol: float = 1e-6

    def __post_init__(self):
        if self.kappa <= 0 or not 0 < self.gamma <= 1:
            raise ValueError("kappa must be positive and gamma in (0, 1]")
        if self.eps_d <= 0 or self.eps <= 0 or self.dedup < 0:
            raise ValueError("tolerances must be positive")


@dataclass(eq=False)
class CollisionMode:
    t: int
    part: int
    obstacle: int
    x_obs: np.ndarray
    maha: float
    maha_newton: float = math.nan  # before the Mahalanobis refinement
    newton_iterations: int = 0
    refine_iterations: int = 0
    projection_failed: bool = False
    part_name: str = ""
    obstacle_name: str = ""

    def sort_key(self):
        return (self.maha, self.t, self.part, self.obstacle)

    def to_dict(self) -> dict:
        return {
            "t": self.t, "part": self.part, "obstacle": self.obstacle,
            "part_name": self.part_name, "obstacle_name": self.obstacle_name,
            "maha": self.maha, "maha_newton": self.maha_newton,
            "newton_iterations": self.newton_iterations,
            "refine_iterations": self.refine_iterations,
            "x_obs": [float(v) for v in self.x_obs],
        }


@dataclass
class NewtonResult:
    x: np.ndarray
    distance: float
    iterations: int


@dataclass
class RefineResult:
    x: np.ndarray
    m: float  # squared Mahalanobis distance
    iterations: int
    projection_failed: bool = False
    history: list[float] = field(default_factory=list)


def newton_to_surface(surface: SurfaceFunction, x_start, Sigma, eps_d: float = 1e-6,
                      eps: float = 1e-8, max_iter: int = 100) -> NewtonResult:
    """Sigma-scaled Newton iteration onto the zero set of ``surface``.

    Each step is the minimum-Sigma^-1-norm correction of the linearized
    distance, x <- x - d Sigma g / (g' Sigma g).
    """
    x = np.array(x_start, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    d = surface.distance(x)
    for k in range(1, max_iter + 1):
        g, _ = surface.gradient(x)
        Sg = Sigma @ g
        denom = float(g @ Sg)
        if not denom >= 1e-14:
            raise DegenerateGradientError(f"g' Sigma g = {denom:.3e} at Newton iteration {k}")
        x_new = x - (d / denom) * Sg
        step = float(np.linalg.norm(x_new - x))
        x = x_new
        d = surface.distance(x)
        if step < eps or d == 0.0:
            return NewtonResult(x, d, k)
    if abs(d) < eps_d:
        return NewtonResult(x, d, max_iter)
    raise NewtonConvergenceError(f"no convergence after {max_iter} Newton iterations (|d| = {abs(d):.3e})")


def refine_mahalanobis(surface: SurfaceFunction, x_surface, x_star, Sigma, gamma: float = 0.5,
                       eps: float = 1e-8, eps_d: float = 1e-6, max_iter: int = 200,
                       continue_on_stall: bool = False, newton_max_iter: int = 100,
                       rtol: float = 0.0) -> RefineResult:
    """Projected descent of the Mahalanobis distance along the contact surface.

    The search direction is the part of Sigma^-1 (x - x*) orthogonal to the
    distance gradient. Steps are halved until a projected iterate does not
    increase the distance; the best iterate seen is returned, so the result
    is never worse than ``x_surface``. A positive ``rtol`` also ends the
    search once a step improves m by less than that fraction.
    """
    x = np.array(x_surface, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    cf = cho_factor(np.asarray(Sigma, dtype=float))

    def quad(y):
        dy = y - x_star
        return float(dy @ cho_solve(cf, dy))

    m = quad(x)
    best_x, best_m = x.copy(), m
    history = [m]
    failed = False
    it = 0
    while it < max_iter:
        g, _ = surface.gradient(x)
        Sd = cho_solve(cf, x - x_star)
        gg = float(g @ g)
        if gg == 0.0:
            break
        s = Sd - (float(g @ Sd) / gg) * g
        denom = float(s @ Sd)
        if not denom > 1e-300:
            break
        a = 1.0
        y, my = x, m
        while a > 1e-12:
            try:
                y = newton_to_surface(surface, x - (a * gamma * m / denom) * s, Sigma,
                                      eps_d, eps, newton_max_iter).x
            except (DegenerateGradientError, NewtonConvergenceError) as exc:
                log.debug("projection failed: %s", exc)
                failed = True
                break
            my = quad(y)
            a *= 0.5
            if continue_on_stall:
                if my < m:
                    break
            elif my <= m or np.linalg.norm(y - x) < eps:
                break
        if failed:
            break
        it += 1
        step = float(np.linalg.norm(y - x))
        stalled = my >= m
        small = my > (1.0 - rtol) * m
        x, m = y, my
        history.append(m)
        if m < best_m:
            best_x, best_m = x.copy(), m
        if stalled or small or step < eps:
            break
    return RefineResult(best_x, best_m, it, failed, history)


def _dedup(modes: list[CollisionMode], tol: float) -> list[CollisionMode]:
    kept: list[CollisionMode] = []
    for mode in sorted(modes, key=CollisionMode.sort_key):
        if all(np.linalg.norm(mode.x_obs - k.x_obs) >= tol for k in kept):
            kept.append(mode)
    return kept


def search_pair(checker, i: int, j: int, t: int, x_star, Sigma, cfg: ClosePointConfig,
                rng: np.random.Generator | None = None) -> CollisionMode | None:
    """Newton phase then Mahalanobis refinement for one (t, i, j); None if it fails."""
    surface = PairSurface(checker, i, j)
    x0 = np.array(x_star, dtype=float)
    for attempt in range(2):
        try:
            nr = newton_to_surface(surface, x0, Sigma, cfg.eps_d, cfg.eps, cfg.newton_max_iter)
            break
        except DegenerateGradientError:
            # exact touch: retry once from a slightly perturbed seed
            rng = rng or np.random.default_rng(0)
            x0 = x_star + cfg.jitter * rng.standard_normal(x0.shape)
        except NewtonConvergenceError as exc:
            log.info("pair (t=%d, i=%d, j=%d) skipped: %s", t, i, j, exc)
            return None
    else:
        log.info("pair (t=%d, i=%d, j=%d) skipped: degenerate gradient", t, i, j)
        return None
    m0 = float((nr.x - x_star) @ np.linalg.solve(Sigma, nr.x - x_star))
    rr = refine_mahalanobis(surface, nr.x, x_star, Sigma, cfg.gamma, cfg.eps, cfg.eps_d,
                            cfg.refine_max_iter, cfg.continue_on_stall, cfg.newton_max_iter, cfg.rtol)
    if rr.projection_failed:
        log.warning("pair (t=%d, i=%d, j=%d): projection failed, keeping best iterate", t, i, j)
    d = surface.distance(rr.x)
    if abs(d) >= cfg.eps_d:
        log.info("pair (t=%d, i=%d, j=%d) skipped: final |d| = %.2e", t, i, j, abs(d))
        return None
    return CollisionMode(t, i, j, rr.x, math.sqrt(max(rr.m, 0.0)), math.sqrt(max(m0, 0.0)),
                         nr.iterations, rr.iterations, rr.projection_failed,
                         checker.robot.names[i], checker.env.names[j])


def close_points(checker, nominal_states, Sigmas, top: int | None = None,
                 cfg: ClosePointConfig | None = None, steps=None) -> list[CollisionMode]:
    """Ranked collision modes over every (t, part, obstacle) triple.

    Triples whose nominal clearance exceeds kappa * sqrt(lambda_max(Sigma_t))
    are not searched. Modes closer than ``cfg.dedup`` in state space are merged
    (the lower-Mahalanobis one is kept) and the result is sorted by
    (maha, t, part, obstacle).
    """
    cfg = cfg or ClosePointConfig()
    steps = range(len(nominal_states)) if steps is None else steps
    modes = []
    for t in steps:
        x_star = nominal_states[t]
        Sigma = Sigmas[t]
        radius = cfg.kappa * math.sqrt(max(np.linalg.eigvalsh(Sigma)[-1], 0.0))
        for i in range(checker.nparts):
            for j in range(checker.nobs):
                if checker.distance(x_star, i, j) > radius:
                    continue
                mode = search_pair(checker, i, j, t, x_star, Sigma, cfg)
                if mode is not None:
                    modes.append(mode)
    ranked = _dedup(modes, cfg.dedup)
    return ranked if top is None else ranked[:top]
