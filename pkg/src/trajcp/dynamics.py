"""Plant models: the fixed-wing airplane and linear test plants.

A model exposes the discrete step map (zero-order hold), its Jacobians, the
observation map and the state -> rigid-body pose map. Heavy lifting happens
in compiled kernels shared with the Monte Carlo engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import _simkern as sk
from ._geomkern import quat_to_mat


class SingularityError(ArithmeticError):
    """The airplane model is undefined (v <= 0 or |gamma| >= pi/2)."""


@dataclass(frozen=True)
class AirplaneParams:
    g: float = 9.81
    rho: float = 1.225
    wing_area: float = 0.3
    mass: float = 1.0
    cd0: float = 0.03
    k_induced: float = 0.05
    alpha0: float = 0.0
    dt: float = 0.129

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not math.isfinite(val):
                raise ValueError(f"airplane parameter {f.name} must be finite")
            if f.name != "alpha0" and val <= 0:
                raise ValueError(f"airplane parameter {f.name} must be positive, got {val}")

    def as_array(self) -> np.ndarray:
        return np.array([self.g, self.rho, self.wing_area, self.mass, self.cd0,
                         self.k_induced, self.alpha0, self.dt])

    def trim_alpha(self, speed: float) -> float:
        """Angle of attack whose lift balances weight in level flight."""
        return self.mass * self.g / (math.pi * self.rho * self.wing_area * speed**2)

    def trim_thrust(self, speed: float) -> float:
        """Longitudinal acceleration cancelling drag at level trim."""
        a = self.trim_alpha(speed)
        drag = self.rho * self.wing_area * speed**2 * (self.cd0 + 4 * math.pi**2 * self.k_induced * a**2)
        return drag / self.mass

    @classmethod
    def level_trim(cls, speed: float = 10.0, **kw) -> "AirplaneParams":
        """Parameters whose alpha0 is the level-flight angle of attack at ``speed``."""
        p = cls(**kw)
        return cls(**{**kw, "alpha0": p.trim_alpha(speed)})


@dataclass
class State:
    x: float
    y: float
    z: float
    v: float
    psi: float
    gamma: float
    phi: float
    alpha: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.v, self.psi, self.gamma, self.phi, self.alpha])

    @classmethod
    def from_array(cls, a) -> "State":
        return cls(*map(float, a))


@dataclass
class Control:
    u_a: float
    u_phidot: float
    u_alphadot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u_a, self.u_phidot, self.u_alphadot])


@dataclass(frozen=True, eq=False)
class Pose:
    translation: np.ndarray
    quaternion: np.ndarray  # (w, x, y, z)

    def rotation_matrix(self) -> np.ndarray:
        R = np.empty((3, 3))
        quat_to_mat(np.asarray(self.quaternion, dtype=float), R)
        return R

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.asarray(t, dtype=float), np.array([1.0, 0.0, 0.0, 0.0]))


def _as_vec(s) -> np.ndarray:
    if isinstance(s, (State, Control)):
        return s.as_array()
    return np.asarray(s, dtype=float)


class PlantModel:
    """Common interface; subclasses fill in the kernel arguments."""

    kind: int
    dx: int
    du: int
    dz: int

    def kernel_args(self):
        """(kind, params, A, B, pose_index) as consumed by the compiled kernels."""
        raise NotImplementedError

    def step(self, x, u) -> np.ndarray:
        kind, prm, Am, Bm, _ = self.kernel_args()
        out = np.empty(self.dx)
        if not sk.model_step(kind, prm, Am, Bm, _as_vec(x), _as_vec(u), out):
            raise SingularityError("dynamics left the model domain during integration")
        return out

    def jacobians(self, x, u) -> tuple[np.ndarray, np.ndarray]:
        """Central differences of the step map, h_i = 1e-6 * max(1, |coordinate|)."""
        x = _as_vec(x)
        u = _as_vec(u)
        A = np.empty((self.dx, self.dx))
        B = np.empty((self.dx, self.du))
        for i in range(self.dx):
            h = 1e-6 * max(1.0, abs(x[i]))
            e = np.zeros(self.dx)
            e[i] = h
            A[:, i] = (self.step(x + e, u) - self.step(x - e, u)) / (2 * h)
        for i in range(self.du):
            h = 1e-6 * max(1.0, abs(u[i]))
            e = np.zeros(self.du)
            e[i] = h
            B[:, i] = (self.step(x, u + e) - self.step(x, u - e)) / (2 * h)
        return A, B

    def observe(self, x) -> np.ndarray:
        return self.observation_matrix() @ _as_vec(x)

    def observation_matrix(self) -> np.ndarray:
        return np.eye(self.dx)

    def configuration(self, x) -> Pose:
        kind, prm, _, _, pidx = self.kernel_args()
        t = np.empty(3)
        q = np.empty(4)
        sk.model_pose(kind, prm, pidx, _as_vec(x), t, q)
        return Pose(t, q)


class AirplaneModel(PlantModel):
    kind = sk.AIRPLANE
    dx = 8
    du = 3
    dz = 8

    def __init__(self, params: AirplaneParams):
        self.params = params
        self._prm = params.as_array()
        self._dummy = np.zeros((1, 1))
        self._pidx = np.full(3, -1, dtype=np.int64)

    @property
    def dt(self) -> float:
        return self.params.dt

    def kernel_args(self):
        return self.kind, self._prm, self._dummy, self._dummy, self._pidx

    def derivative(self, x, u) -> np.ndarray:
        out = np.empty(8)
        if not sk.airplane_derivative(_as_vec(x), _as_vec(u), self._prm, out):
            raise SingularityError("airplane model requires v > 0 and |gamma| < pi/2")
        return out


class LinearModel(PlantModel):
    """x' = A x + B u, z = H x; the pose is a translation read off the state.

    ``position_index`` names up to three state coordinates used as (x, y, z);
    missing axes are fixed at zero and the rotation is the identity.
    """

    kind = sk.LINEAR

    def __init__(self, A, B, position_index=(0,), H=None, dt: float = 1.0):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.dx = self.A.shape[0]
        self.du = self.B.shape[1]
        if self.A.shape != (self.dx, self.dx) or self.B.shape[0] != self.dx:
            raise ValueError("inconsistent linear plant matrices")
        self.H = np.eye(self.dx) if H is None else np.atleast_2d(np.asarray(H, dtype=float))
        self.dz = self.H.shape[0]
        pidx = list(position_index) + [-1] * (3 - len(position_index))
        self._pidx = np.array(pidx[:3], dtype=np.int64)
        self.dt = dt
        self._prm = np.zeros(8)

    def kernel_args(self):
        return self.kind, self._prm, self.A, self.B, self._pidx

    def jacobians(self, x, u):
        return self.A.copy(), self.B.copy()

    def observation_matrix(self) -> np.ndarray:
        return self.H.copy()

    @classmethod
    def double_integrator(cls, dt: float = 0.1, axes: int = 1) -> "LinearModel":
        """Position/velocity pairs per axis, state (p_1..p_k, v_1..v_k)."""
        I = np.eye(axes)
        A = np.block([[I, dt * I], [np.zeros((axes, axes)), I]])
        B = np.vstack([0.5 * dt**2 * I, dt * I])
        return cls(A, B, position_index=tuple(range(axes)), dt=dt)

    @classmethod
    def translation(cls, dim: int = 3) -> "LinearModel":
        """State is the position itself; x' = x + u."""
        return cls(np.eye(dim), np.eye(dim), position_index=tuple(range(dim)))


# Function forms operating on airplane parameters directly.

def continuous_derivative(p: AirplaneParams, s, u) -> np.ndarray:
    return AirplaneModel(p).derivative(s, u)


def step_nominal(p: AirplaneParams, s, u) -> np.ndarray:
    return AirplaneModel(p).step(s, u)


def jacobians(p: AirplaneParams, s, u) -> tuple[np.ndarray, np.ndarray]:
    return AirplaneModel(p).jacobians(s, u)


def configuration(p: AirplaneParams, s) -> Pose:
    return AirplaneModel(p).configuration(s)


def observe(s) -> np.ndarray:
    return _as_vec(s).copy()
