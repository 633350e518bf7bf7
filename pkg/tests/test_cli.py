import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mimicry.cli import build_parser, main, merged_config


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def gvhd_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("gvhd")
    assert run("simulate", "--scenario", "gvhd", "--n", 300, "--seed", 7, "--out", d) == 0
    return d


@pytest.fixture(scope="module")
def null_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("null")
    assert run("simulate", "--scenario", "null", "--n", 1000, "--seed", 3, "--out", d) == 0
    return d


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file() and p.name != "meta.json"}


def test_simulate_writes_datasets(gvhd_dir):
    for name in ("scenario.json", "paths.csv", "outcomes.csv", "counterfactuals.csv", "dataset.json", "meta.json"):
        assert (gvhd_dir / name).exists()
    info = json.loads((gvhd_dir / "dataset.json").read_text())
    assert info["n"] == 300 and info["seed"] == 7


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--scenario", "pcp", "--n", 50, "--seed", 2],
        ["gcomp", "--builtin", "figure1", "--regime", "azt=1,proph=1", "--naive", "pcp=1"],
        ["converge", "--levels", "2..4", "--mesh-level", 9],
    ],
)
def test_reruns_are_byte_identical(tmp_path, argv):
    assert run(*argv, "--out", tmp_path / "a") == 0
    assert run(*argv, "--out", tmp_path / "b") == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a and a == b


def test_rerun_of_analysis_is_byte_identical(gvhd_dir, tmp_path):
    for sub in ("a", "b"):
        assert run("estimate", "--data", gvhd_dir, "--grid", 11, "--out", tmp_path / sub) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_missing_seed(tmp_path, capsys):
    assert run("simulate", "--n", 10, "--out", tmp_path) != 0
    assert "seed" in capsys.readouterr().err


def test_zero_subjects(tmp_path):
    assert run("simulate", "--n", 0, "--seed", 1, "--out", tmp_path) != 0


def test_refuses_to_overwrite(tmp_path):
    assert run("simulate", "--n", 5, "--seed", 1, "--out", tmp_path) == 0
    before = (tmp_path / "outcomes.csv").read_bytes()
    assert run("simulate", "--n", 6, "--seed", 2, "--out", tmp_path) != 0
    assert (tmp_path / "outcomes.csv").read_bytes() == before
    assert run("simulate", "--n", 6, "--seed", 2, "--out", tmp_path, "--overwrite") == 0
    assert (tmp_path / "outcomes.csv").read_bytes() != before


def test_gcomp_builtin(capsys):
    assert run("gcomp", "--builtin", "figure1", "--regime", "azt=1,proph=1") == 0
    res = json.loads(capsys.readouterr().out)
    assert res["expected_survivors"] == "10000"
    assert res["population"] == 16000


def test_gcomp_positivity_error(capsys):
    assert run("gcomp", "--builtin", "figure1", "--regime", "azt=0,proph=0") != 0
    assert "proph" in capsys.readouterr().err


def test_null_test_exits_zero(null_dir, tmp_path, capsys):
    assert run("test", "--data", null_dir, "--alpha", 0.05, "--out", tmp_path) == 0
    res = json.loads((tmp_path / "test.json").read_text())
    assert 0.0 <= res["p_value"] <= 1.0
    assert res["alpha"] == 0.05


def test_converge_csv(tmp_path):
    assert run("converge", "--levels", "2..5", "--mesh-level", 10, "--out", tmp_path) == 0
    with open(tmp_path / "convergence.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["level"]) for r in rows] == [2, 3, 4, 5]
    for r in rows:
        assert float(r["sup_gap"]) <= float(r["bound"])
    assert json.loads((tmp_path / "summary.json").read_text())["nonincreasing"] is True


def test_mimic_zero_psi_is_constant(gvhd_dir, tmp_path):
    assert run("mimic", "--data", gvhd_dir, "--psi", 0.0, "--subjects", 20, "--out", tmp_path) == 0
    y = np.loadtxt(gvhd_dir / "outcomes.csv", delimiter=",", skiprows=1)[:, 1]
    files = sorted((tmp_path / "trajectories").glob("subject_*.csv"))
    assert len(files) == 20
    for i, f in enumerate(files):
        x = np.loadtxt(f, delimiter=",", skiprows=1, ndmin=2)[:, 1]
        np.testing.assert_array_equal(x, y[i])


def test_mimic_reports_closed_form_deviation(gvhd_dir, tmp_path):
    assert run("mimic", "--data", gvhd_dir, "--subjects", 50, "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["max_closed_form_deviation"] < 1e-8


def test_bad_model_path(gvhd_dir, tmp_path, capsys):
    assert run("mimic", "--data", gvhd_dir, "--model", tmp_path / "nope.json", "--out", tmp_path / "o") != 0
    assert "error" in capsys.readouterr().err


def test_model_file(gvhd_dir, tmp_path):
    model = tmp_path / "model.json"
    model.write_text(json.dumps({"family": "GvHDMultiplicative", "psi": [0.5], "outcome_kind": "Survival"}))
    assert run("mimic", "--data", gvhd_dir, "--model", model, "--subjects", 3, "--out", tmp_path / "o") == 0


def test_estimate_outputs(gvhd_dir, tmp_path):
    assert run("estimate", "--data", gvhd_dir, "--bounds=-1,2", "--grid", 13, "--out", tmp_path) == 0
    res = json.loads((tmp_path / "estimate.json").read_text())
    assert set(res) >= {"psi_hat", "ci"}
    lines = (tmp_path / "score_curve.csv").read_text().splitlines()
    assert lines[0] == "psi,z" and len(lines) == 14


def test_validate_outputs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("simulate", "--n", 2000, "--seed", 1, "--out", a) == 0
    assert run("simulate", "--n", 2000, "--seed", 2, "--out", b) == 0
    out = tmp_path / "v"
    assert run("validate", "--data", a, "--reference", b, "--times", "0.3,0.5", "--min-size", 100, "--out", out) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_strata"] > 0 and summary["pass_rate"] >= 0.8
    assert (out / "strata.csv").read_text().startswith("stratum_id,n_a,n_b,ks_stat,critical_value,pass")


def test_config_merge_order(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 40, "scenario": "pcp", "seed": 9}))
    args = build_parser().parse_args(["simulate", "--config", str(cfg), "--n", "12"])
    merged = merged_config(args)
    assert merged["n"] == 12  # flag beats file
    assert merged["scenario"] == "pcp"  # file beats default
    assert merged["seed"] == 9
    assert merged_config(build_parser().parse_args(["simulate"]))["n"] == 1000  # default


def test_json_outputs_are_strict(gvhd_dir, tmp_path):
    assert run("mimic", "--data", gvhd_dir, "--subjects", 5, "--out", tmp_path) == 0
    text = (tmp_path / "solver_reports.json").read_text()
    json.loads(text, parse_constant=lambda c: pytest.fail(f"non-standard constant {c}"))


def test_console_script(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "mimicry.cli", "gcomp", "--builtin", "figure1", "--regime", "A0=0,A1=1"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["probability"] == "5/8"
