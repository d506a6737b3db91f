from __future__ import annotations

import json

import pytest

from conftest import SCENARIO_DIR
from superadjoint.cli import main

LINEAR = str(SCENARIO_DIR / "linear_scalar.cfg")
STEERING = str(SCENARIO_DIR / "steering.cfg")


def _files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_solve_writes_outputs_and_is_deterministic(tmp_path, capsys):
    runs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["solve", LINEAR, "--n-steps", "100", "--out", str(out)]) == 0
        runs.append(_files(out))
    assert set(runs[0]) == {"trace.csv", "control.csv", "trajectory.csv", "report.json"}
    assert runs[0] == runs[1]
    report = json.loads(runs[0]["report.json"])
    assert report["scenario"] == "linear_scalar" and report["grid"]["n_steps"] == 100
    assert report["final_cost"] <= report["initial_cost"]
    assert "wall_clock_seconds" not in report
    assert "final_cost=" in capsys.readouterr().out


def test_timing_and_json_flags(tmp_path, capsys):
    assert main(["solve", LINEAR, "--n-steps", "50", "--out", str(tmp_path), "--timing", "--json"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["wall_clock_seconds"] > 0
    assert json.loads((tmp_path / "report.json").read_text()) == printed


def test_double_integrator_config_reaches_target(tmp_path):
    assert main(["solve", str(SCENARIO_DIR / "double_integrator.cfg"), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["final_cost"] <= 1e-4


def test_baseline_flag_adds_trace(tmp_path):
    assert main(["solve", LINEAR, "--n-steps", "50", "--baseline", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert (tmp_path / "trace_baseline.csv").exists()
    assert report["baseline"]["integrations"] > 0


def test_mf_solve(tmp_path):
    args = ["mf-solve", STEERING, "--n-steps", "50", "--particles", "20", "--out", str(tmp_path)]
    assert main(args) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["particles"] == 20 and report["command"] == "mf-solve"
    lines = (tmp_path / "ensemble.csv").read_text().splitlines()
    assert len(lines) == 1 + 51 * 20


def test_wrong_kind_of_scenario_is_a_config_error(tmp_path, capsys):
    assert main(["solve", STEERING, "--out", str(tmp_path)]) == 2
    assert main(["mf-solve", LINEAR, "--out", str(tmp_path)]) == 2
    assert "mf-solve" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["solve", "missing.cfg"],
    ["check", LINEAR, "--n-steps", "0"],
    ["check", LINEAR, "--inject", "nope"],
    ["bench", "no/such/*.cfg"],
    ["report", "missing-dir"],
])
def test_config_errors_exit_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_check_passes_and_fault_injection_fails(tmp_path, capsys):
    assert main(["check", LINEAR, "--n-steps", "100", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "checks.json").read_text())
    assert data["passed"] and all(c["passed"] for c in data["checks"])
    capsys.readouterr()
    assert main(["check", LINEAR, "--n-steps", "100", "--inject", "grad_bug"]) == 1
    captured = capsys.readouterr()
    assert "FAIL" in captured.out and captured.err.startswith("failed:")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exits_3(tmp_path):
    cfg = (SCENARIO_DIR / "linear_scalar.cfg").read_text()
    path = tmp_path / "blow.cfg"
    path.write_text(cfg.replace("a = -1", "a = 1e308"))
    assert main(["solve", str(path), "--n-steps", "20", "--out", str(tmp_path / "o")]) == 3


def test_bench_rows(tmp_path, capsys):
    pattern = str(SCENARIO_DIR / "[ls]*.cfg")
    assert main(["bench", pattern, "--n-steps", "40", "--out", str(tmp_path), "--json"]) == 0
    captured = capsys.readouterr()
    rows = json.loads(captured.out)["rows"]
    assert [(r["scenario"], r["method"]) for r in rows] == [
        ("linear_scalar", "feedback"), ("linear_scalar", "baseline")]
    assert "skipping" in captured.err
    lines = (tmp_path / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("scenario,method,final_cost") and len(lines) == 3


def test_report_pretty_prints(tmp_path, capsys):
    main(["solve", LINEAR, "--n-steps", "20", "--out", str(tmp_path)])
    capsys.readouterr()
    assert main(["report", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "final_cost:" in out and "trace:" in out
    (tmp_path / "broken.json").write_text("{")
    assert main(["report", str(tmp_path / "broken.json")]) == 2
