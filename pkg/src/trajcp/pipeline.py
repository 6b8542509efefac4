"""End-to-end runs: linearize, gains, collision modes, mixture, estimate.

Every run produces a :class:`ResultRecord` that carries the estimate, the
configuration it came from (with defaults filled in) and the time spent in
each stage, so setup cost can be compared against sampling cost.
"""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .closepoint import CollisionMode, close_points
from .estimator import Estimate, TrajectoryProblem, ais_estimate, is_fixed, naive_mc
from .isopt import MixtureSpec, build_mixture
from .scenario import Scenario

log = logging.getLogger(__name__)

METHODS = ("naive", "is", "ais")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - relabel with the stage name
        raise StageError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


@dataclass
class ResultRecord:
    estimate: Estimate
    scenario_name: str
    scenario_hash: str
    version: str
    config: dict
    weights: list[float] = field(default_factory=list)
    components: list[dict] = field(default_factory=list)
    closepoints: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def setup_time(self) -> float:
        return sum(v for k, v in self.timings.items() if k != "estimate")

    def to_dict(self, with_time: bool = True) -> dict:
        d = {
            "version": self.version,
            "scenario": self.scenario_name,
            "scenario_hash": self.scenario_hash,
            "estimate": self.estimate.to_dict(with_time),
            "weights": list(self.weights),
            "components": self.components,
            "closepoints": self.closepoints,
            "config": self.config,
        }
        if with_time:
            d["timings"] = dict(self.timings)
        return d

    def to_json(self, with_time: bool = True) -> str:
        return json.dumps(self.to_dict(with_time), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        return cls(Estimate.from_dict(d["estimate"]), d["scenario"], d["scenario_hash"], d["version"],
                   d["config"], list(d.get("weights", [])), list(d.get("components", [])),
                   list(d.get("closepoints", [])), dict(d.get("timings", {})))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "ResultRecord":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def problem_for(scenario: Scenario) -> TrajectoryProblem:
    return TrajectoryProblem(scenario.loop, scenario.checker, scenario.noise, scenario.margin)


def find_modes(scenario: Scenario, top: int | None = None) -> list[CollisionMode]:
    """Ranked collision modes along the nominal trajectory."""
    Sigma = scenario.system.Sigma
    return close_points(scenario.checker, scenario.nominal.states, Sigma, top=top, cfg=scenario.closepoint)


def build_components(scenario: Scenario, modes: list[CollisionMode]) -> MixtureSpec:
    mc = scenario.mixture
    return build_mixture(modes, scenario.design, scenario.noise, D=mc.components,
                         defensive_floor=mc.defensive_floor, weight_init=mc.weight_init,
                         alpha_defensive=mc.alpha_defensive, checker=scenario.checker,
                         covariance=mc.covariance)


def run_estimate(scenario: Scenario, method: str | None = None) -> ResultRecord:
    """Run the configured estimator (or ``method``) on ``scenario``."""
    method = method or scenario.estimator.method
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if method != scenario.estimator.method:
        scenario = scenario.with_estimator(method=method)
    est_cfg = scenario.estimator
    timings: dict[str, float] = {}
    with _stage("linearize", timings):
        scenario.plant  # noqa: B018 - cached property, evaluated for its timing
    with _stage("gains", timings):
        scenario.gains  # noqa: B018
        scenario.system  # noqa: B018
    problem = problem_for(scenario)
    modes: list[CollisionMode] = []
    mixture = None
    if method in ("is", "ais"):
        with _stage("closepoints", timings):
            modes = find_modes(scenario)
        with _stage("components", timings):
            mixture = build_components(scenario, modes)
        log.info("%d modes, mixture with %d components", len(modes), mixture.D)
    with _stage("estimate", timings):
        if method == "naive":
            est = naive_mc(problem, est_cfg.m, est_cfg.seed)
        elif method == "is":
            est = is_fixed(problem, mixture, est_cfg.m, est_cfg.seed)
        else:
            est = ais_estimate(problem, mixture, est_cfg.k, est_cfg.iterations, est_cfg.step_size, est_cfg.seed)
    weights = [1.0] if mixture is None else list(est.trace[-1].alpha)
    return ResultRecord(
        estimate=est,
        scenario_name=scenario.name,
        scenario_hash=scenario.digest(),
        version=__version__,
        config=scenario.config(),
        weights=[float(w) for w in weights],
        components=[] if mixture is None else [c.summary() for c in mixture.components],
        closepoints=[m.to_dict() for m in modes],
        timings=timings,
    )


def summary_line(rec: ResultRecord) -> str:
    e = rec.estimate
    return (f"{e.method:>5}  p_hat={e.p_hat:.4%}  sigma_hat={e.sigma_hat:.4%}  m={e.samples_used}  "
            f"hits={e.hits}  setup={rec.setup_time:.2f}s  sampling={rec.timings.get('estimate', 0.0):.2f}s")
