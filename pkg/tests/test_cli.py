import csv
import json
from pathlib import Path

import pytest

from nnbarrier.cli import EXIT_BELOW, EXIT_ERROR, EXIT_OK, RunReport, main

PROBLEMS = Path(__file__).resolve().parents[1] / "problems"


def run(*argv):
    return main([str(a) for a in argv])


def read_report(out):
    return json.loads((Path(out) / "report.json").read_text())


@pytest.fixture(scope="module")
def drift_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("drift")
    code = run("synthesize", PROBLEMS / "drift1d.json", "--out", out)
    return code, out


def test_certify_contraction_and_modes(tmp_path):
    assert run("certify", PROBLEMS / "contraction2d.json", "--out", tmp_path / "lin", "--audit", 5000) == EXIT_OK
    assert run("certify", PROBLEMS / "contraction2d.json", "--out", tmp_path / "itv", "--bounds", "interval") == EXIT_OK
    lin, itv = read_report(tmp_path / "lin"), read_report(tmp_path / "itv")
    assert lin["P_s"] >= 0.9 and lin["regions"] == 16
    assert itv["P_s"] <= lin["P_s"] + 1e-6
    assert lin["details"]["audit"]["ok"]
    assert len(lin["spec_sha256"]) == 64 and lin["seed"] == 0
    back = RunReport.from_json((tmp_path / "lin" / "report.json").read_text())
    assert back.P_s == lin["P_s"]


def test_betamap_2d_svg(tmp_path):
    run("certify", PROBLEMS / "contraction2d.json", "--out", tmp_path)
    assert run("betamap", tmp_path / "report.json", "--out", tmp_path) == EXIT_OK
    svg = (tmp_path / "betamap_final.svg").read_text()
    assert svg.count("<rect") == 16
    rows = list(csv.DictReader((tmp_path / "betamap_final.csv").open()))
    assert len(rows) == 16


def test_certify_below_threshold_exit(tmp_path):
    assert run("certify", PROBLEMS / "drift1d.json", "--out", tmp_path) == EXIT_BELOW


def test_malformed_spec(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1, "network": {}}))
    assert run("certify", bad, "--out", tmp_path) == EXIT_ERROR
    assert "error:" in capsys.readouterr().err
    assert run("certify", PROBLEMS / "contraction2d.json", "--degree", 1, "--out", tmp_path) == EXIT_ERROR


def test_synthesize_requires_control(tmp_path, capsys):
    assert run("synthesize", PROBLEMS / "contraction2d.json", "--out", tmp_path) == EXIT_ERROR
    assert "control structure required" in capsys.readouterr().err


def test_synthesize_already_safe(tmp_path):
    assert run("synthesize", PROBLEMS / "minimal1d.json", "--out", tmp_path) == EXIT_OK
    rep = read_report(tmp_path)
    assert rep["controlled_fraction"] == 0.0
    lines = (tmp_path / "policy.csv").read_text().strip().splitlines()
    assert len(lines) == 1  # header only


def test_synthesize_drift(drift_run):
    code, out = drift_run
    assert code == EXIT_OK
    rep = read_report(out)
    assert rep["P_s"] >= rep["threshold"]
    assert 0.0 < rep["controlled_fraction"] < 1.0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["reached_threshold"]


def test_betamap_1d_before_after(drift_run, capsys):
    _, out = drift_run
    assert run("betamap", out / "report.json", "--out", out, "--which", "uncontrolled") == EXIT_OK
    assert run("betamap", out / "report.json", "--out", out) == EXIT_OK
    assert "CSV only" in capsys.readouterr().out
    assert not (out / "betamap_final.svg").exists()
    before = [float(r["beta"]) for r in csv.DictReader((out / "betamap_uncontrolled.csv").open())]
    after = [float(r["beta"]) for r in csv.DictReader((out / "betamap_final.csv").open())]
    assert max(after) <= max(before)


def test_simulate_with_and_without_policy(drift_run, tmp_path):
    _, out = drift_run
    spec = PROBLEMS / "drift1d.json"
    args = ["simulate", spec, "-M", 2000, "--trajectories", 2]
    assert run(*args, "--out", tmp_path / "a") == EXIT_OK
    assert run(*args, "--out", tmp_path / "b") == EXIT_OK
    a = json.loads((tmp_path / "a" / "estimate.json").read_text())["estimate"]
    b = json.loads((tmp_path / "b" / "estimate.json").read_text())["estimate"]
    assert a == b
    assert (tmp_path / "a" / "trajectory_1.csv").exists()
    assert run(*args, "--policy", out / "policy.csv", "--certificate", out / "report.json", "--out", tmp_path / "c") == EXIT_OK
    doc = json.loads((tmp_path / "c" / "estimate.json").read_text())
    assert doc["estimate"]["p_hat"] > a["p_hat"]
    assert doc["soundness"]["passed"]


def test_bounds_dump(tmp_path):
    assert run("bounds", PROBLEMS / "contraction2d.json", "--out", tmp_path) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "bounds.csv").open()))
    assert rows and len((tmp_path / "partition.csv").read_text().strip().splitlines()) == 17


def test_bad_tolerance_override(tmp_path):
    assert run("certify", PROBLEMS / "contraction2d.json", "--tolerance", "nonsense", "--out", tmp_path) == EXIT_ERROR
