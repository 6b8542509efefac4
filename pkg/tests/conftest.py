from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from trajcp.pipeline import build_components, find_modes, problem_for
from trajcp.scenario import example_path, load_scenario

DATA = Path(__file__).parent / "data"

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    if rep.when == "call" or rep.failed:
        entry["ok"] = entry["ok"] and rep.passed
    entry["notes"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        notes = "; ".join(dict.fromkeys(e["notes"]))
        terminalreporter.write_line(f"criterion {n} [{'PASS' if e['ok'] else 'FAIL'}] {e['title']}"
                                    + (f": {notes}" if notes else ""))


def load_json(name: str) -> dict:
    return json.loads((DATA / name).read_text())


@pytest.fixture(scope="session")
def linear_scenario():
    return load_scenario(example_path("double_integrator"))


@pytest.fixture(scope="session")
def linear_problem(linear_scenario):
    return problem_for(linear_scenario)


@pytest.fixture(scope="session")
def linear_modes(linear_scenario):
    return find_modes(linear_scenario)


@pytest.fixture(scope="session")
def linear_mixture(linear_scenario, linear_modes):
    return build_components(linear_scenario, linear_modes)


@pytest.fixture(scope="session")
def airplane_scenario():
    return load_scenario(example_path("airplane"))


@pytest.fixture(scope="session")
def airplane_problem(airplane_scenario):
    return problem_for(airplane_scenario)


@pytest.fixture(scope="session")
def airplane_modes(airplane_scenario):
    return find_modes(airplane_scenario)


@pytest.fixture(scope="session")
def airplane_mixture(airplane_scenario, airplane_modes):
    return build_components(airplane_scenario, airplane_modes)


@pytest.fixture(scope="session")
def linear_oracle():
    return load_json("linear_oracle.json")


@pytest.fixture(scope="session")
def airplane_oracle():
    return load_json("airplane_oracle.json")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
