"""Scenario files: plant, nominal trajectory, noise, costs, geometry and
estimator settings in one YAML document.

Matrices may be written as a scalar (multiple of the identity), a list
(diagonal) or a nested list (full matrix). See ``data/airplane.yaml`` for
the reference layout.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .closepoint import ClosePointConfig
from .control import (LinearDesign, LqgGains, NominalInconsistency, NominalTrajectory, TrackingLoop,
                      closed_loop_system, kalman_gains, linearize_trajectory, lqr_gains)
from .dynamics import AirplaneModel, AirplaneParams, LinearModel, PlantModel, SingularityError
from .gauss import GaussianSpec, TrajectoryNoiseSpec
from .geometry import CollisionChecker, ConvexShape, Environment, Polytope, RobotBody, Sphere
from .isopt import COVARIANCE_MODES


class ScenarioError(ValueError):
    """Schema or consistency violation; ``field`` names the offending entry."""

    def __init__(self, field: str, constraint: str):
        super().__init__(f"{field}: {constraint}")
        self.field = field
        self.constraint = constraint


@dataclass(frozen=True)
class MixtureConfig:
    components: int = 10
    defensive_floor: float = 0.1
    alpha_defensive: float = 0.5
    weight_init: str = "uniform"
    covariance: str = "optimize"

    def __post_init__(self):
        if self.components < 1:
            raise ScenarioError("mixture.components", "must be at least 1")
        if not 0 <= self.defensive_floor < 1:
            raise ScenarioError("mixture.defensive_floor", "must lie in [0, 1)")
        if not 0 < self.alpha_defensive < 1:
            raise ScenarioError("mixture.alpha_defensive", "must lie in (0, 1)")
        if self.weight_init not in ("uniform", "halfspace"):
            raise ScenarioError("mixture.weight_init", "must be 'uniform' or 'halfspace'")
        if self.covariance not in COVARIANCE_MODES:
            raise ScenarioError("mixture.covariance", "must be 'optimize' or 'mean_shift'")


@dataclass(frozen=True)
class EstimatorConfig:
    method: str = "ais"
    m: int = 1000  # total samples for naive and fixed IS
    k: int = 20  # adaptive batch size
    iterations: int = 50  # adaptive batches
    step_size: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("naive", "is", "ais"):
            raise ScenarioError("estimator.method", "must be one of naive, is, ais")
        for name in ("m", "k", "iterations"):
            if getattr(self, name) < 1:
                raise ScenarioError(f"estimator.{name}", "must be at least 1")
        if not self.step_size > 0:
            raise ScenarioError("estimator.step_size", "must be positive")


@dataclass(frozen=True, eq=False)
class LqrCost:
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray


def _section(raw: dict, key: str, required: bool = True) -> dict:
    if key not in raw:
        if required:
            raise ScenarioError(key, "missing section")
        return {}
    val = raw[key]
    if not isinstance(val, dict):
        raise ScenarioError(key, "must be a mapping")
    return val


def _matrix(val, n: int, name: str, spd: bool = True) -> np.ndarray:
    try:
        a = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(name, "must be a number, a list or a nested list") from None
    if a.ndim == 0:
        M = float(a) * np.eye(n)
    elif a.ndim == 1:
        if a.shape[0] != n:
            raise ScenarioError(name, f"diagonal needs {n} entries, got {a.shape[0]}")
        M = np.diag(a)
    elif a.ndim == 2:
        if a.shape != (n, n):
            raise ScenarioError(name, f"matrix must be {n}x{n}, got {a.shape[0]}x{a.shape[1]}")
        M = a
    else:
        raise ScenarioError(name, "too many dimensions")
    if not np.all(np.isfinite(M)):
        raise ScenarioError(name, "entries must be finite")
    if spd:
        if np.abs(M - M.T).max() > 1e-12 * max(np.abs(M).max(), 1e-300):
            raise ScenarioError(name, "must be symmetric positive definite (not symmetric)")
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise ScenarioError(name, "must be symmetric positive definite") from None
    return M


def _vector(val, n: int | None, name: str) -> np.ndarray:
    try:
        a = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(name, "must be a list of numbers") from None
    if a.ndim != 1 or (n is not None and a.shape[0] != n):
        raise ScenarioError(name, f"must be a list of {n} numbers" if n else "must be a list of numbers")
    if not np.all(np.isfinite(a)):
        raise ScenarioError(name, "entries must be finite")
    return a


def parse_shape(d: dict, name: str) -> ConvexShape:
    if not isinstance(d, dict) or "type" not in d:
        raise ScenarioError(name, "shape needs a 'type'")
    kind = d["type"]
    try:
        if kind == "sphere":
            return Sphere(_vector(d.get("center", [0, 0, 0]), 3, f"{name}.center"), float(d["radius"]))
        if kind == "polytope":
            return Polytope(np.asarray(d["vertices"], dtype=float))
        if kind == "box":
            if "size" in d:
                c = _vector(d.get("center", [0, 0, 0]), 3, f"{name}.center")
                h = 0.5 * _vector(d["size"], 3, f"{name}.size")
                return Polytope.box(c - h, c + h)
            return Polytope.box(_vector(d["lo"], 3, f"{name}.lo"), _vector(d["hi"], 3, f"{name}.hi"))
    except KeyError as exc:
        raise ScenarioError(name, f"missing key {exc.args[0]!r}") from None
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(name, str(exc)) from None
    raise ScenarioError(f"{name}.type", f"unknown shape type {kind!r}")


def _named_shapes(items, name: str) -> list[tuple[str, ConvexShape]]:
    if not isinstance(items, list) or not items:
        raise ScenarioError(name, "must be a non-empty list")
    out = []
    for n, d in enumerate(items):
        label = d.get("name", f"{name}[{n}]") if isinstance(d, dict) else f"{name}[{n}]"
        out.append((str(label), parse_shape(d, f"{name}[{n}]")))
    return out


def _build_model(dyn: dict) -> PlantModel:
    kind = dyn.get("model", "airplane")
    if kind == "airplane":
        params = dict(dyn.get("params", {}))
        allowed = {f.name for f in fields(AirplaneParams)}
        for key in params:
            if key not in allowed:
                raise ScenarioError(f"dynamics.params.{key}", "unknown airplane parameter")
        trim = dyn.get("trim_speed")
        try:
            p = AirplaneParams.level_trim(float(trim), **params) if trim is not None else AirplaneParams(**params)
        except ValueError as exc:
            raise ScenarioError("dynamics.params", str(exc)) from None
        return AirplaneModel(p)
    if kind == "double_integrator":
        return LinearModel.double_integrator(float(dyn.get("dt", 0.1)), int(dyn.get("axes", 2)))
    if kind == "linear":
        try:
            A = np.asarray(dyn["A"], dtype=float)
            B = np.asarray(dyn["B"], dtype=float)
        except KeyError as exc:
            raise ScenarioError(f"dynamics.{exc.args[0]}", "required for a linear model") from None
        try:
            return LinearModel(A, B, tuple(dyn.get("position_index", (0,))), dyn.get("H"), float(dyn.get("dt", 1.0)))
        except ValueError as exc:
            raise ScenarioError("dynamics", str(exc)) from None
    raise ScenarioError("dynamics.model", f"unknown model {kind!r}")


def _build_nominal(nom: dict, model: PlantModel) -> NominalTrajectory:
    if "level_flight" in nom:
        if not isinstance(model, AirplaneModel):
            raise ScenarioError("nominal.level_flight", "only available for the airplane model")
        lf = nom["level_flight"]
        p = model.params
        speed = float(lf.get("speed", 10.0))
        pos = _vector(lf.get("position", [0, 0, 0]), 3, "nominal.level_flight.position")
        heading = float(lf.get("heading", 0.0))
        steps = int(nom.get("steps", 100))
        x0 = np.array([*pos, speed, heading, 0.0, 0.0, p.trim_alpha(speed)])
        controls = np.tile([p.trim_thrust(speed), 0.0, 0.0], (steps, 1))
    else:
        if "x0" not in nom and "states" not in nom:
            raise ScenarioError("nominal.x0", "required unless nominal.states is given")
        if "controls" not in nom:
            raise ScenarioError("nominal.controls", "missing")
        c = nom["controls"]
        if isinstance(c, dict):
            u = _vector(c.get("constant"), model.du, "nominal.controls.constant")
            controls = np.tile(u, (int(c.get("steps", nom.get("steps", 1))), 1))
        else:
            controls = np.atleast_2d(np.asarray(c, dtype=float))
        if controls.ndim != 2 or controls.shape[1] != model.du or controls.shape[0] < 1:
            raise ScenarioError("nominal.controls", f"must be a T x {model.du} array with T >= 1")
        if "states" in nom:
            states = np.asarray(nom["states"], dtype=float)
            if states.shape != (controls.shape[0] + 1, model.dx):
                raise ScenarioError("nominal.states", f"must be a (T+1) x {model.dx} array")
            traj = NominalTrajectory(states, controls)
            try:
                traj.check(model)
            except NominalInconsistency as exc:
                raise ScenarioError("nominal.states", f"inconsistent with the dynamics (max residual {exc.residual:.3e})") from None
            return traj
        x0 = _vector(nom["x0"], model.dx, "nominal.x0")
    try:
        return NominalTrajectory.from_controls(model, x0, controls)
    except SingularityError as exc:
        raise ScenarioError("nominal", f"integration left the model domain: {exc}") from None


def _noise_block(val, n: int, T: int, name: str) -> list[np.ndarray]:
    if isinstance(val, dict) and "per_step" in val:
        steps = val["per_step"]
        if not isinstance(steps, list) or len(steps) != T:
            raise ScenarioError(f"{name}.per_step", f"needs exactly {T} entries")
        return [_matrix(s, n, f"{name}.per_step[{t}]") for t, s in enumerate(steps)]
    return [_matrix(val, n, name)] * T


def _build_noise(raw: dict, model: PlantModel, T: int) -> TrajectoryNoiseSpec:
    for key in ("P0", "Vu", "Vx", "W"):
        if key not in raw:
            raise ScenarioError(f"noise.{key}", "missing")
    P0 = _matrix(raw["P0"], model.dx, "noise.P0")
    Vu = _noise_block(raw["Vu"], model.du, T, "noise.Vu")
    Vx = _noise_block(raw["Vx"], model.dx, T, "noise.Vx")
    W = _noise_block(raw["W"], model.dz, T, "noise.W")
    cache: dict[int, GaussianSpec] = {}

    def spec(M):
        if id(M) not in cache:
            cache[id(M)] = GaussianSpec(np.zeros(M.shape[0]), M)
        return cache[id(M)]

    return TrajectoryNoiseSpec(spec(P0), [(spec(a), spec(b), spec(c)) for a, b, c in zip(Vu, Vx, W)])


def _dataclass_from(cls, raw: dict, name: str):
    allowed = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in allowed:
            raise ScenarioError(f"{name}.{key}", "unknown option")
    try:
        return cls(**raw)
    except ScenarioError:
        raise
    except (TypeError, ValueError) as exc:
        raise ScenarioError(name, str(exc)) from None


@dataclass(eq=False)
class Scenario:
    name: str
    model: PlantModel
    nominal: NominalTrajectory
    noise: TrajectoryNoiseSpec
    lqr: LqrCost
    robot: RobotBody
    env: Environment
    margin: float = 0.0
    closepoint: ClosePointConfig = field(default_factory=ClosePointConfig)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    raw: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.nominal.T

    @property
    def dt(self) -> float:
        return float(self.model.dt)

    @cached_property
    def plant(self):
        return linearize_trajectory(self.model, self.nominal)

    @cached_property
    def kalman(self):
        P0, Vu, Vx, W = self.noise_covariances()
        return kalman_gains(self.plant, P0, Vu, Vx, W)

    @cached_property
    def gains(self) -> LqgGains:
        L = lqr_gains(self.plant, self.lqr.Q, self.lqr.R, self.lqr.Qf)
        return LqgGains(L, self.kalman.K)

    @cached_property
    def system(self):
        P0, Vu, Vx, W = self.noise_covariances()
        return closed_loop_system(self.plant, self.gains, P0, Vu, Vx, W)

    @cached_property
    def design(self) -> LinearDesign:
        return LinearDesign(self.nominal, self.plant, self.gains, self.system, self.noise.layout)

    @cached_property
    def loop(self) -> TrackingLoop:
        return TrackingLoop(self.model, self.nominal, self.plant, self.gains)

    @cached_property
    def checker(self) -> CollisionChecker:
        return CollisionChecker(self.model, self.robot, self.env)

    def noise_covariances(self):
        Vu = np.stack([s[0].cov for s in self.noise.per_step])
        Vx = np.stack([s[1].cov for s in self.noise.per_step])
        W = np.stack([s[2].cov for s in self.noise.per_step])
        return self.noise.init.cov, Vu, Vx, W

    def config(self) -> dict:
        """The scenario as loaded, with every default filled in."""
        out = copy.deepcopy(self.raw)
        out["collision"] = {"margin": self.margin}
        out["closepoints"] = asdict(self.closepoint)
        out["mixture"] = asdict(self.mixture)
        out["estimator"] = asdict(self.estimator)
        return out

    def digest(self) -> str:
        return _sha256(self.config())

    def problem_digest(self) -> str:
        """Hash of the sections that fix the true collision probability.

        Close point, mixture and estimator settings change how the
        probability is estimated, not its value, so they are left out.
        """
        cfg = self.config()
        return _sha256({k: cfg[k] for k in PROBLEM_SECTIONS if k in cfg})

    def with_estimator(self, **kw) -> "Scenario":
        s = copy.copy(self)
        s.estimator = replace(self.estimator, **kw)
        return s

    def with_mixture(self, **kw) -> "Scenario":
        s = copy.copy(self)
        s.mixture = replace(self.mixture, **kw)
        return s


PROBLEM_SECTIONS = ("dynamics", "nominal", "noise", "lqr", "robot", "environment", "collision")


def _sha256(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=float).encode()).hexdigest()


def scenario_from_dict(raw: dict) -> Scenario:
    if not isinstance(raw, dict):
        raise ScenarioError("<root>", "scenario must be a mapping")
    known = {"name", "dynamics", "nominal", "noise", "lqr", "robot", "environment", "collision",
             "closepoints", "mixture", "estimator"}
    for key in raw:
        if key not in known:
            raise ScenarioError(key, "unknown section")
    model = _build_model(_section(raw, "dynamics"))
    nominal = _build_nominal(_section(raw, "nominal"), model)
    noise = _build_noise(_section(raw, "noise"), model, nominal.T)
    lq = _section(raw, "lqr", required=False)
    lqr = LqrCost(_matrix(lq.get("Q", 1.0), model.dx, "lqr.Q"), _matrix(lq.get("R", 1.0), model.du, "lqr.R"),
                  _matrix(lq.get("Qf", 1.0), model.dx, "lqr.Qf"))
    robot = RobotBody(_named_shapes(_section(raw, "robot").get("parts"), "robot.parts"))
    env = Environment(_named_shapes(_section(raw, "environment").get("obstacles"), "environment.obstacles"))
    coll = _section(raw, "collision", required=False)
    margin = float(coll.get("margin", 0.0))
    if margin < 0:
        raise ScenarioError("collision.margin", "must be non-negative")
    cp = _dataclass_from(ClosePointConfig, _section(raw, "closepoints", required=False), "closepoints")
    mix = _dataclass_from(MixtureConfig, _section(raw, "mixture", required=False), "mixture")
    est = _dataclass_from(EstimatorConfig, _section(raw, "estimator", required=False), "estimator")
    return Scenario(str(raw.get("name", "scenario")), model, nominal, noise, lqr, robot, env, margin,
                    cp, mix, est, copy.deepcopy(raw))


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError(str(path), f"not valid YAML ({exc})") from None
    return scenario_from_dict(raw)


def example_path(name: str = "airplane") -> Path:
    """Path of a scenario shipped with the package."""
    return Path(str(resources.files("trajcp") / "data" / f"{name}.yaml"))
