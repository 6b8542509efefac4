"""Naive Monte Carlo, fixed-mixture IS and adaptive mixture IS.

Every sample owns a counter-based random stream keyed by (seed, index): the
first uniform picks the mixture component, the next ``layout.size`` normals
are the standardized noise vector. Results therefore do not depend on batch
boundaries or on how many threads run the rollouts.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from .gauss import TrajectoryNoise, TrajectoryNoiseSpec, sample_stream
from .isopt import MixtureSpec

GRAD_CLIP = 1e6
THREADS_ENV = "TRAJCP_THREADS"


class EstimatorError(RuntimeError):
    pass


class Problem(Protocol):
    """A nominal noise law plus a (vectorized) failure indicator."""

    nominal: TrajectoryNoiseSpec

    def indicator(self, noise: TrajectoryNoise) -> tuple[np.ndarray, np.ndarray]:
        """Return (f, domain_exit) boolean arrays for a batch of noise."""
        ...


def apply_thread_env():
    n = os.environ.get(THREADS_ENV)
    if n:
        import numba

        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


@dataclass(frozen=True)
class SampleRecord:
    f: bool
    log_w: float
    component_draw: int
    domain_exit: bool


@dataclass
class SampleBatch:
    f: np.ndarray
    log_w: np.ndarray
    component: np.ndarray
    domain_exit: np.ndarray
    logq: np.ndarray | None = None  # (k, D) component log-densities
    logQ: np.ndarray | None = None

    def record(self, r: int) -> SampleRecord:
        return SampleRecord(bool(self.f[r]), float(self.log_w[r]), int(self.component[r]),
                            bool(self.domain_exit[r]))


@dataclass
class TraceRow:
    batch: int
    samples: int
    p_hat: float
    sigma_hat: float
    alpha: list[float]
    max_ratio: float
    hits: int
    domain_exits: int


@dataclass
class Estimate:
    method: str
    p_hat: float
    v_hat: float
    samples_used: int
    seed: int
    trace: list[TraceRow]
    wall_time: float = 0.0
    hits: int = 0
    domain_exits: int = 0
    curve: dict = field(default_factory=dict)  # samples, p_hat, sigma_hat at checkpoints

    @property
    def sigma_hat(self) -> float:
        return math.sqrt(self.v_hat)

    def to_dict(self, with_time: bool = True) -> dict:
        d = {
            "method": self.method, "p_hat": self.p_hat, "v_hat": self.v_hat,
            "sigma_hat": self.sigma_hat, "samples_used": self.samples_used, "seed": self.seed,
            "hits": self.hits, "domain_exits": self.domain_exits,
            "trace": [vars(r) for r in self.trace],
            "curve": {k: [float(x) for x in v] for k, v in self.curve.items()},
        }
        if with_time:
            d["wall_time"] = self.wall_time
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Estimate":
        trace = [TraceRow(**r) for r in d["trace"]]
        return cls(d["method"], d["p_hat"], d["v_hat"], d["samples_used"], d["seed"], trace,
                   d.get("wall_time", 0.0), d.get("hits", 0), d.get("domain_exits", 0),
                   {k: np.asarray(v) for k, v in d.get("curve", {}).items()})


# -- sampling -------------------------------------------------------------

def draw_noise(specs: Sequence[TrajectoryNoiseSpec], alpha, seed: int, indices) -> tuple[TrajectoryNoise, np.ndarray]:
    """Noise for the given sample indices drawn from the mixture (specs, alpha)."""
    layout = specs[0].layout
    alpha = np.asarray(alpha, dtype=float)
    cum = np.cumsum(alpha)
    cum[-1] = 1.0
    n = len(indices)
    Z = np.empty((n, layout.size))
    comp = np.empty(n, dtype=np.int64)
    for r, idx in enumerate(indices):
        rng = sample_stream(seed, idx)
        comp[r] = min(int(np.searchsorted(cum, rng.random(), side="right")), len(alpha) - 1)
        Z[r] = rng.standard_normal(layout.size)
    z = TrajectoryNoise.from_flat(Z, layout)
    if len(specs) == 1:
        return specs[0].transform(z), comp
    out = TrajectoryNoise(np.empty_like(z.init), np.empty_like(z.ctrl), np.empty_like(z.proc), np.empty_like(z.meas))
    for d in np.unique(comp):
        sel = comp == d
        part = specs[d].transform(TrajectoryNoise(z.init[sel], z.ctrl[sel], z.proc[sel], z.meas[sel]))
        out.init[sel], out.ctrl[sel], out.proc[sel], out.meas[sel] = part.init, part.ctrl, part.proc, part.meas
    return out, comp


def evaluate_batch(problem: Problem, specs: Sequence[TrajectoryNoiseSpec] | None, alpha, seed: int,
                   start: int, k: int) -> SampleBatch:
    """Draw and evaluate samples start..start+k-1.

    ``specs`` lists the mixture components (``None`` means sample the nominal
    law with unit likelihood ratios). The nominal law must be the last
    component when it is part of the mixture.
    """
    idx = range(start, start + k)
    if specs is None:
        noise, comp = draw_noise([problem.nominal], [1.0], seed, idx)
        f, ex = problem.indicator(noise)
        return SampleBatch(np.asarray(f, bool), np.zeros(k), comp, np.asarray(ex, bool))
    alpha = np.asarray(alpha, dtype=float)
    noise, comp = draw_noise(specs, alpha, seed, idx)
    f, ex = problem.indicator(noise)
    logq = np.stack([s.log_density(noise) for s in specs], axis=-1)
    logP = logq[:, -1] if specs[-1] is problem.nominal else problem.nominal.log_density(noise)
    act = alpha > 0
    with np.errstate(divide="ignore"):
        logQ = logsumexp(logq[:, act] + np.log(alpha[act]), axis=-1)
    return SampleBatch(np.asarray(f, bool), logP - logQ, comp, np.asarray(ex, bool), logq, logQ)


def evaluate_sample(problem: Problem, sampling: MixtureSpec | TrajectoryNoiseSpec, index: int,
                    seed: int) -> SampleRecord:
    if isinstance(sampling, TrajectoryNoiseSpec):
        specs, alpha = [sampling], np.ones(1)
        if sampling is not problem.nominal:
            specs = [sampling, problem.nominal]
            alpha = np.array([1.0, 0.0])
    else:
        specs, alpha = sampling.specs, sampling.weights
    return evaluate_batch(problem, specs, alpha, seed, index, 1).record(0)


# -- estimators from weighted samples ----------------------------------------

def self_normalized(f, log_w) -> tuple[float, float]:
    """(p_hat, V_hat) = (sum w f / sum w, sum (w (f - p_hat))^2 / (sum w)^2)."""
    f = np.asarray(f, dtype=float)
    log_w = np.asarray(log_w, dtype=float)
    if f.size == 0:
        raise EstimatorError("no samples")
    w = np.exp(log_w - log_w.max())
    sw = w.sum()
    if not sw > 0:
        raise EstimatorError("sum of likelihood ratios vanished")
    p = float(np.dot(w, f) / sw)
    v = float(np.sum((w * (f - p)) ** 2) / sw**2)
    return min(max(p, 0.0), 1.0), max(v, 0.0)


def _curve_self_normalized(f, log_w, checkpoints) -> dict:
    f = np.asarray(f, dtype=float)
    w = np.exp(log_w - log_w.max())
    cw = np.cumsum(w)[checkpoints - 1]
    cwf = np.cumsum(w * f)[checkpoints - 1]
    cw2 = np.cumsum(w * w)[checkpoints - 1]
    cw2f = np.cumsum(w * w * f)[checkpoints - 1]
    p = cwf / cw
    v = (cw2f - 2 * p * cw2f + p * p * cw2) / cw**2
    return {"samples": checkpoints, "p_hat": p, "sigma_hat": np.sqrt(np.maximum(v, 0.0))}


def _curve_binomial(f, checkpoints) -> dict:
    p = np.cumsum(f)[checkpoints - 1] / checkpoints
    return {"samples": checkpoints, "p_hat": p, "sigma_hat": np.sqrt(p * (1 - p) / checkpoints)}


def _checkpoints(m: int, step: int | None = None) -> np.ndarray:
    step = step or max(1, m // 100)
    c = np.arange(step, m + 1, step)
    return c if c.size and c[-1] == m else np.append(c, m)


def _max_ratio(log_w) -> float:
    return float(np.exp(np.max(log_w))) if len(log_w) else 0.0


def _chunks(start: int, m: int, size: int):
    for s in range(start, start + m, size):
        yield s, min(size, start + m - s)


def _collect(problem, specs, alpha, seed, start, m, chunk) -> SampleBatch:
    parts = [evaluate_batch(problem, specs, alpha, seed, s, n) for s, n in _chunks(start, m, chunk)]
    cat = lambda name: None if getattr(parts[0], name) is None else np.concatenate([getattr(p, name) for p in parts])
    return SampleBatch(cat("f"), cat("log_w"), cat("component"), cat("domain_exit"), cat("logq"), cat("logQ"))


def naive_mc(problem: Problem, m: int, seed: int = 0, chunk: int = 4096) -> Estimate:
    """Plain Monte Carlo; V_hat = p_hat (1 - p_hat) / m."""
    if m < 1:
        raise ValueError("m must be at least 1")
    apply_thread_env()
    t0 = time.perf_counter()
    b = _collect(problem, None, None, seed, 0, m, chunk)
    f = b.f.astype(float)
    p = float(f.mean())
    v = p * (1 - p) / m
    row = TraceRow(1, m, p, math.sqrt(v), [1.0], 1.0, int(b.f.sum()), int(b.domain_exit.sum()))
    return Estimate("naive", p, v, m, seed, [row], time.perf_counter() - t0, int(b.f.sum()),
                    int(b.domain_exit.sum()), _curve_binomial(f, _checkpoints(m)))


def is_fixed(problem: Problem, mixture: MixtureSpec, m: int, seed: int = 0, chunk: int = 4096) -> Estimate:
    """Single-batch mixture IS with self-normalized estimates."""
    if m < 1:
        raise ValueError("m must be at least 1")
    apply_thread_env()
    t0 = time.perf_counter()
    b = _collect(problem, mixture.specs, mixture.weights, seed, 0, m, chunk)
    p, v = self_normalized(b.f, b.log_w)
    row = TraceRow(1, m, p, math.sqrt(v), [float(a) for a in mixture.weights], _max_ratio(b.log_w),
                   int(b.f.sum()), int(b.domain_exit.sum()))
    return Estimate("is", p, v, m, seed, [row], time.perf_counter() - t0, int(b.f.sum()),
                    int(b.domain_exit.sum()), _curve_self_normalized(b.f, b.log_w, _checkpoints(m)))


def project_floor(alpha, floor: float) -> np.ndarray:
    """Raise the last (nominal) weight to ``floor`` and rescale the others."""
    alpha = np.asarray(alpha, dtype=float)
    alpha = alpha / alpha.sum()
    if alpha[-1] < floor:
        rest = alpha[:-1]
        s = rest.sum()
        alpha = np.append(rest * ((1.0 - floor) / s) if s > 0 else np.full(rest.size, (1 - floor) / rest.size), floor)
    return alpha


@dataclass
class MirrorState:
    alpha_tilde: np.ndarray
    sq_grad_sum: float = 0.0  # sum over updates of max_d g_d^2
    updates: int = 0

    @property
    def grad_scale(self) -> float:
        """Root mean square of the gradient sup-norms seen so far."""
        return math.sqrt(self.sq_grad_sum / self.updates) if self.updates else 0.0


def mirror_gradient(f, log_w, logq, logQ) -> np.ndarray:
    """g_d = -(1/k) sum_j f_j w_j^2 q_d(X_j) / Q(X_j), evaluated through logs.

    Each term is capped at GRAD_CLIP before summation.
    """
    f = np.asarray(f, dtype=bool)
    k = f.shape[0]
    if not f.any():
        return np.zeros(logq.shape[1])
    terms = 2.0 * log_w[f, None] + logq[f] - logQ[f, None]
    terms = np.minimum(terms, math.log(GRAD_CLIP))
    g = -np.exp(terms).sum(axis=0) / k
    return np.clip(g, -GRAD_CLIP, GRAD_CLIP)


def mirror_descent_step(state: MirrorState, batch: SampleBatch, i: int, C: float = 0.3,
                        floor: float = 0.0) -> np.ndarray:
    """One stochastic mirror descent update of the mixture weights.

    The gradient is divided by the root mean square of the sup-norms of all
    gradients so far (an AdaGrad-style scale), which makes C a unitless step
    size in log-weight space; no single step moves a log-weight by more than
    C. Returns the new weights; ``state`` is updated in place
    (log-weights re-synchronized after the floor clamp).
    """
    g = mirror_gradient(batch.f, batch.log_w, batch.logq, batch.logQ)
    state.sq_grad_sum += float(np.abs(g).max()) ** 2 if g.size else 0.0
    state.updates += 1
    if state.grad_scale > 0:
        state.alpha_tilde = state.alpha_tilde - (C / math.sqrt(i)) * (g / state.grad_scale)
    a = np.exp(state.alpha_tilde - state.alpha_tilde.max())
    alpha = project_floor(a / a.sum(), floor)
    with np.errstate(divide="ignore"):
        state.alpha_tilde = np.log(alpha)
    return alpha


def ais_estimate(problem: Problem, mixture: MixtureSpec, k: int = 20, iterations: int = 100,
                 C: float = 0.3, seed: int = 0) -> Estimate:
    """Adaptive mixture IS: batches of k samples with mirror descent on the
    weights between batches; final self-normalized estimates pool all
    samples, each weighted against the mixture it was drawn from."""
    if k < 1 or iterations < 1:
        raise ValueError("k and the number of iterations must be at least 1")
    apply_thread_env()
    t0 = time.perf_counter()
    alpha = mixture.weights.copy()
    with np.errstate(divide="ignore"):
        state = MirrorState(np.log(alpha))
    specs = mixture.specs
    fs, lws, exits = [], [], []
    trace = []
    for i in range(1, iterations + 1):
        b = evaluate_batch(problem, specs, alpha, seed, (i - 1) * k, k)
        fs.append(b.f)
        lws.append(b.log_w)
        exits.append(b.domain_exit)
        f_all = np.concatenate(fs)
        lw_all = np.concatenate(lws)
        p, v = self_normalized(f_all, lw_all)
        trace.append(TraceRow(i, i * k, p, math.sqrt(v), [float(a) for a in alpha], _max_ratio(lw_all),
                              int(f_all.sum()), int(np.concatenate(exits).sum())))
        if i < iterations:
            alpha = mirror_descent_step(state, b, i, C, mixture.defensive_floor)
    f_all = np.concatenate(fs)
    lw_all = np.concatenate(lws)
    p, v = self_normalized(f_all, lw_all)
    m = k * iterations
    n_exit = int(np.concatenate(exits).sum())
    return Estimate("ais", p, v, m, seed, trace, time.perf_counter() - t0, int(f_all.sum()), n_exit,
                    _curve_self_normalized(f_all, lw_all, _checkpoints(m, k)))


class TrajectoryProblem:
    """Closed-loop rollouts on the true plant with swept collision checks."""

    def __init__(self, loop, checker, nominal: TrajectoryNoiseSpec, margin: float = 0.0):
        from .geometry import D_FLOOR

        self.loop = loop
        self.checker = checker
        self.nominal = nominal
        self.margin = margin
        self.d_floor = D_FLOOR

    def indicator(self, noise: TrajectoryNoise):
        hit, exit_, _, _ = self.loop.simulate(noise, self.checker.SR, self.checker.SE, self.margin, self.d_floor)
        return hit, exit_

    def details(self, noise: TrajectoryNoise):
        """(hit, domain_exit, first_hit (t, i, j), min_distance) per sample."""
        return self.loop.simulate(noise, self.checker.SR, self.checker.SE, self.margin, self.d_floor)
