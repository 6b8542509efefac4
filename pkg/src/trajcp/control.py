"""LQG tracking: linearization, LQR and Kalman gains, the joint linear
closed-loop model and exact nonlinear rollouts.

Index convention: matrices for the transition into step t (t = 1..T) are
stored at position t - 1, so ``A[t-1]`` is A_t and the control applied at
step t - 1 is u*_{t-1} + L_t xhat_{t-1} with ``L[t-1]`` = L_t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _simkern as sk
from .dynamics import PlantModel
from .gauss import NoiseLayout, TrajectoryNoise, TrajectoryNoiseSpec


class NominalInconsistency(ValueError):
    def __init__(self, residual: float):
        super().__init__(f"nominal states do not follow the dynamics (max residual {residual:.3e})")
        self.residual = residual


@dataclass(eq=False)
class NominalTrajectory:
    states: np.ndarray  # (T + 1, dx)
    controls: np.ndarray  # (T, du)

    @property
    def T(self) -> int:
        return self.controls.shape[0]

    @classmethod
    def from_controls(cls, model: PlantModel, x0, controls) -> "NominalTrajectory":
        controls = np.atleast_2d(np.asarray(controls, dtype=float))
        xs = [np.asarray(x0, dtype=float)]
        for u in controls:
            xs.append(model.step(xs[-1], u))
        return cls(np.array(xs), controls)

    def residual(self, model: PlantModel) -> float:
        res = [np.abs(model.step(self.states[t - 1], self.controls[t - 1]) - self.states[t]).max()
               for t in range(1, self.T + 1)]
        return float(max(res))

    def check(self, model: PlantModel, tol: float = 1e-9):
        if self.states.shape != (self.T + 1, model.dx) or self.controls.shape[1] != model.du:
            raise ValueError("nominal trajectory shapes do not match the plant")
        r = self.residual(model)
        if r > tol:
            raise NominalInconsistency(r)


@dataclass(eq=False)
class LinearizedPlant:
    A: np.ndarray  # (T, dx, dx)
    B: np.ndarray  # (T, dx, du)
    H: np.ndarray  # (T, dz, dx)

    @property
    def T(self) -> int:
        return self.A.shape[0]


@dataclass(eq=False)
class LqgGains:
    L: np.ndarray  # (T, du, dx)
    K: np.ndarray  # (T, dx, dz)


@dataclass(eq=False)
class KalmanResult:
    K: np.ndarray
    prior: np.ndarray  # filter a-priori covariances, (T, dx, dx)
    posterior: np.ndarray  # (T + 1, dx, dx), posterior[0] = P0


@dataclass(eq=False)
class ClosedLoopLinearSystem:
    """y_t = F_t y_{t-1} + G_t r_t with y_t = [xbar_t; xhat_t]."""

    F: np.ndarray  # (T, 2dx, 2dx)
    G: np.ndarray  # (T, 2dx, 2dx)
    R: np.ndarray  # (T, 2dx, 2dx), covariance of the lumped noise r_t
    cov_y: np.ndarray  # (T + 1, 2dx, 2dx)
    Sigma: np.ndarray  # (T + 1, dx, dx), a-priori covariance of xbar_t

    @property
    def T(self) -> int:
        return self.F.shape[0]


@dataclass(eq=False)
class RolloutResult:
    states: np.ndarray  # (n_valid, dx)
    estimates: np.ndarray  # (n_valid, dx)
    applied_controls: np.ndarray  # (n_valid - 1, du)
    domain_exit: bool


def noise_covariances(spec: TrajectoryNoiseSpec):
    """(P0, Vu, Vx, W) with per-step stacks of shape (T, d, d)."""
    Vu = np.stack([s[0].cov for s in spec.per_step])
    Vx = np.stack([s[1].cov for s in spec.per_step])
    W = np.stack([s[2].cov for s in spec.per_step])
    return spec.init.cov, Vu, Vx, W


def _per_step(M, T):
    M = np.asarray(M, dtype=float)
    return np.broadcast_to(M, (T, *M.shape[-2:])) if M.ndim == 2 else M


def linearize_trajectory(model: PlantModel, nominal: NominalTrajectory) -> LinearizedPlant:
    T = nominal.T
    A = np.empty((T, model.dx, model.dx))
    B = np.empty((T, model.dx, model.du))
    for t in range(T):
        A[t], B[t] = model.jacobians(nominal.states[t], nominal.controls[t])
    H = np.broadcast_to(model.observation_matrix(), (T, model.dz, model.dx)).copy()
    return LinearizedPlant(A, B, H)


def lqr_gains(plant: LinearizedPlant, Qcost, Rcost, Qfinal) -> np.ndarray:
    """Finite-horizon LQR by backward Riccati recursion from P_T = Qfinal."""
    T = plant.T
    Q = _per_step(Qcost, T)
    R = _per_step(Rcost, T)
    P = np.asarray(Qfinal, dtype=float)
    L = np.empty((T, plant.B.shape[2], plant.A.shape[1]))
    for t in range(T - 1, -1, -1):
        A, B = plant.A[t], plant.B[t]
        S = R[t] + B.T @ P @ B
        L[t] = -np.linalg.solve(S, B.T @ P @ A)
        P = Q[t] + A.T @ P @ (A + B @ L[t])
        P = 0.5 * (P + P.T)
    return L


def kalman_gains(plant: LinearizedPlant, P0, Vu, Vx, W) -> KalmanResult:
    T = plant.T
    Vu, Vx, W = (_per_step(M, T) for M in (Vu, Vx, W))
    dx = plant.A.shape[1]
    K = np.empty((T, dx, plant.H.shape[1]))
    prior = np.empty((T, dx, dx))
    post = np.empty((T + 1, dx, dx))
    post[0] = P0
    for t in range(T):
        A, B, H = plant.A[t], plant.B[t], plant.H[t]
        Sm = A @ post[t] @ A.T + B @ Vu[t] @ B.T + Vx[t]
        Sm = 0.5 * (Sm + Sm.T)
        S = H @ Sm @ H.T + W[t]
        try:
            K[t] = np.linalg.solve(S.T, H @ Sm.T).T
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(f"innovation covariance singular at step {t + 1}") from None
        Sp = (np.eye(dx) - K[t] @ H) @ Sm
        prior[t] = Sm
        post[t + 1] = 0.5 * (Sp + Sp.T)
    return KalmanResult(K, prior, post)


def closed_loop_system(plant: LinearizedPlant, gains: LqgGains, P0, Vu, Vx, W) -> ClosedLoopLinearSystem:
    T = plant.T
    Vu, Vx, W = (_per_step(M, T) for M in (Vu, Vx, W))
    dx = plant.A.shape[1]
    I = np.eye(dx)
    Z = np.zeros((dx, dx))
    F = np.empty((T, 2 * dx, 2 * dx))
    G = np.empty_like(F)
    R = np.empty_like(F)
    cov = np.empty((T + 1, 2 * dx, 2 * dx))
    cov[0] = np.block([[P0, Z], [Z, Z]])
    for t in range(T):
        A, B, H, L, K = plant.A[t], plant.B[t], plant.H[t], gains.L[t], gains.K[t]
        ABL = A + B @ L
        KHA = K @ H @ A
        F[t] = np.block([[A, B @ L], [KHA, ABL - KHA]])
        G[t] = np.block([[I, Z], [K @ H, I]])
        R[t] = np.block([[B @ Vu[t] @ B.T + Vx[t], Z], [Z, K @ W[t] @ K.T]])
        C = F[t] @ cov[t] @ F[t].T + G[t] @ R[t] @ G[t].T
        cov[t + 1] = 0.5 * (C + C.T)
    return ClosedLoopLinearSystem(F, G, R, cov, cov[:, :dx, :dx].copy())


def injection_matrix(plant: LinearizedPlant, gains: LqgGains, t: int) -> np.ndarray:
    """J_t: raw step noise (vu, vx, w) -> lumped r_t = [B vu + vx; K w]."""
    A, B, K = plant.A[t - 1], plant.B[t - 1], gains.K[t - 1]
    dx, du = B.shape
    dz = K.shape[1]
    J = np.zeros((2 * dx, du + dx + dz))
    J[:dx, :du] = B
    J[:dx, du : du + dx] = np.eye(dx)
    J[dx:, du + dx :] = K
    return J


def mean_response_all(sys: ClosedLoopLinearSystem, plant: LinearizedPlant, gains: LqgGains,
                      layout: NoiseLayout) -> np.ndarray:
    """C_t for t = 0..T, shape (T + 1, dx, n): raw noise means -> E[xbar_t]."""
    dx = layout.dx
    T = sys.T
    M = np.zeros((2 * dx, layout.size))
    M[:dx, : layout.d0] = np.eye(layout.d0)
    out = np.empty((T + 1, dx, layout.size))
    out[0] = M[:dx]
    for t in range(1, T + 1):
        M = sys.F[t - 1] @ M
        base = layout.d0 + (t - 1) * layout.step_dim
        M[:, base : base + layout.step_dim] += sys.G[t - 1] @ injection_matrix(plant, gains, t)
        out[t] = M[:dx]
    return out


def mean_response_matrix(sys: ClosedLoopLinearSystem, plant: LinearizedPlant, gains: LqgGains,
                         t: int, layout: NoiseLayout) -> np.ndarray:
    if not 0 <= t <= sys.T:
        raise IndexError(f"time step {t} outside 0..{sys.T}")
    return mean_response_all(sys, plant, gains, layout)[t]


class TrackingLoop:
    """Nominal trajectory plus LQG gains, ready to roll out on the true plant."""

    def __init__(self, model: PlantModel, nominal: NominalTrajectory, plant: LinearizedPlant, gains: LqgGains):
        self.model = model
        self.nominal = nominal
        self.plant = plant
        self.gains = gains
        self._xs = np.ascontiguousarray(nominal.states)
        self._us = np.ascontiguousarray(nominal.controls)
        self._A = np.ascontiguousarray(plant.A)
        self._B = np.ascontiguousarray(plant.B)
        self._H = np.ascontiguousarray(plant.H)
        self._L = np.ascontiguousarray(gains.L)
        self._K = np.ascontiguousarray(gains.K)

    def kernel_args(self):
        return self._xs, self._us, self._L, self._K, self._A, self._B, self._H

    def rollout(self, noise: TrajectoryNoise) -> RolloutResult:
        kind, prm, Am, Bm, _ = self.model.kernel_args()
        T = self.nominal.T
        dx, du = self.model.dx, self.model.du
        X = np.zeros((T + 1, dx))
        Xh = np.zeros((T + 1, dx))
        U = np.zeros((T, du))
        n = sk.rollout_kernel(kind, prm, Am, Bm, *self.kernel_args(),
                              np.asarray(noise.init, dtype=float), np.ascontiguousarray(noise.ctrl),
                              np.ascontiguousarray(noise.proc), np.ascontiguousarray(noise.meas),
                              X, Xh, U)
        return RolloutResult(X[:n], Xh[:n], U[: n - 1], n < T + 1)

    def simulate(self, noise: TrajectoryNoise, SR, SE, margin: float, d_floor: float):
        """Batch rollouts plus swept collision checks.

        Returns (hit, domain_exit, first_hit, min_distance) arrays.
        """
        kind, prm, Am, Bm, pidx = self.model.kernel_args()
        N = noise.init.shape[0]
        hit = np.zeros(N, dtype=np.bool_)
        exit_ = np.zeros(N, dtype=np.bool_)
        first = np.full((N, 3), -1, dtype=np.int64)
        dmin = np.empty(N)
        sk.simulate_batch(kind, prm, Am, Bm, pidx, *self.kernel_args(),
                          np.ascontiguousarray(noise.init), np.ascontiguousarray(noise.ctrl),
                          np.ascontiguousarray(noise.proc), np.ascontiguousarray(noise.meas),
                          SR, SE, float(margin), float(d_floor), hit, exit_, first, dmin)
        return hit, exit_, first, dmin


class LinearDesign:
    """Everything the proposal construction needs from the linearized loop.

    Mean-response matrices are built on first use and cached.
    """

    def __init__(self, nominal: NominalTrajectory, plant: LinearizedPlant, gains: LqgGains,
                 system: ClosedLoopLinearSystem, layout: NoiseLayout):
        self.nominal = nominal
        self.plant = plant
        self.gains = gains
        self.system = system
        self.layout = layout
        self._response: np.ndarray | None = None

    @property
    def response(self) -> np.ndarray:
        if self._response is None:
            self._response = mean_response_all(self.system, self.plant, self.gains, self.layout)
        return self._response

    def C(self, t: int) -> np.ndarray:
        if not 0 <= t <= self.system.T:
            raise IndexError(f"time step {t} outside 0..{self.system.T}")
        return self.response[t]
