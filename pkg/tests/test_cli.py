from __future__ import annotations

import csv
import json
import math

import pytest

from trajcp import cli, pipeline
from trajcp.pipeline import ResultRecord, StageError, run_estimate
from trajcp.report import read_curve_csv, read_trace_csv
from trajcp.scenario import example_path

LINEAR = str(example_path("double_integrator"))


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_validate(capsys):
    code, out, _ = run(capsys, "validate", LINEAR)
    assert code == 0
    assert "double-integrator-wall" in out and "T=20" in out and "noise dim" in out


def test_invalid_scenario_exits_2(capsys, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(example_path("double_integrator").read_text().replace("dt: 0.1", "dt: 0.1\n  model: boat", 1))
    code, _, err = run(capsys, "validate", str(bad))
    assert code == 2 and "dynamics.model" in err
    code, _, err = run(capsys, "validate", str(tmp_path / "missing.yaml"))
    assert code == 2
    code, _, err = run(capsys, "estimate", LINEAR, "--threads", "0")
    assert code == 2 and "--threads" in err


def test_runtime_failure_exits_3(capsys, monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("no close points")

    monkeypatch.setattr(pipeline, "find_modes", broken)
    code, _, err = run(capsys, "estimate", LINEAR, "--method", "is", "-m", "10")
    assert code == 3
    assert "stage 'closepoints' failed" in err


def test_stage_error_names_the_stage(linear_scenario, monkeypatch):
    monkeypatch.setattr(pipeline, "build_components", lambda *a, **k: 1 / 0)
    with pytest.raises(StageError) as exc:
        run_estimate(linear_scenario, "ais")
    assert exc.value.stage == "components"
    assert isinstance(exc.value.cause, ZeroDivisionError)


def test_closepoints_table_and_json(capsys, tmp_path):
    js = tmp_path / "modes.json"
    code, out, _ = run(capsys, "closepoints", LINEAR, "--top", "3", "--json", str(js))
    assert code == 0
    rows = [l for l in out.splitlines()[1:] if l.strip()]
    assert len(rows) == 3 and rows[0].split()[1] == "20"
    modes = json.loads(js.read_text())
    assert [m["t"] for m in modes] == [20, 19, 18]


def test_components_table(capsys):
    code, out, _ = run(capsys, "components", LINEAR, "-D", "3")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 4 and "nominal" in lines[-1]
    assert sum(float(l.split()[-1]) for l in lines[1:]) == pytest.approx(1.0, abs=1e-3)


def test_estimate_and_report(capsys, tmp_path):
    recs = []
    for method, extra in (("naive", ["-m", "2000"]), ("is", ["-m", "500"]), ("ais", ["-k", "20", "--iterations", "10"])):
        path = tmp_path / f"{method}.json"
        code, out, _ = run(capsys, "estimate", LINEAR, "--method", method, "--seed", "3", *extra, "-o", str(path))
        assert code == 0 and out.startswith(f"{method:>5}  p_hat=")
        recs.append(path)
    rec = ResultRecord.load(recs[2])
    assert rec.estimate.samples_used == 200 and len(rec.estimate.trace) == 10
    assert rec.config["estimator"]["seed"] == 3
    assert len(rec.weights) == 3 and math.isclose(sum(rec.weights), 1.0, abs_tol=1e-12)

    out_dir = tmp_path / "report"
    code, out, _ = run(capsys, "report", *map(str, recs), "--out", str(out_dir), "--reference", "0.0016")
    assert code == 0 and "weights ais" in out
    traces = read_trace_csv(out_dir / "trace.csv")
    assert set(traces) == {"naive", "is", "ais"}
    assert len(traces["ais"]) == 10
    with (out_dir / "trace.csv").open() as fh:
        header = next(csv.reader(fh))
    assert header == ["method", "batch", "samples", "p_hat", "sigma_hat", "alpha_1", "alpha_2", "alpha_3"]
    curves = read_curve_csv(out_dir / "curve.csv")
    assert curves["naive"]["samples"][-1] == 2000
    assert curves["ais"]["p_hat"][-1] == pytest.approx(rec.estimate.p_hat, rel=1e-12)
    svg = (out_dir / "convergence.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    assert (out_dir / "summary.txt").read_text().count("\n") >= 5


def test_report_rejects_unreadable_records(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    code, _, err = run(capsys, "report", str(bad), "--out", str(tmp_path / "r"))
    assert code == 2 and "result record" in err


def test_result_record_round_trip(linear_scenario, tmp_path):
    rec = run_estimate(linear_scenario.with_estimator(k=10, iterations=3))
    back = ResultRecord.load(rec.save(tmp_path / "r.json"))
    assert back.to_dict() == rec.to_dict()
    assert back.scenario_hash == linear_scenario.with_estimator(k=10, iterations=3).digest()
    assert set(rec.timings) == {"linearize", "gains", "closepoints", "components", "estimate"}


def test_reruns_are_identical_apart_from_timing(linear_scenario):
    sc = linear_scenario.with_estimator(k=10, iterations=5, seed=11)
    assert run_estimate(sc).to_json(with_time=False) == run_estimate(sc).to_json(with_time=False)
