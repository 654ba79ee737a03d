import json

import numpy as np
import pytest
from click.testing import CliRunner

from memiss.cli import main
from memiss.core import read_csv


def run_cli(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


@pytest.fixture()
def workdir(tmp_path):
    cfg = {
        "design": {"type": "replication", "columns": {"xstar1": "xstar1", "xstar2": "xstar2"}},
        "outcome": {"type": "linear", "y": "y", "covariates": ["z"], "exposure": "x"},
        "method": "rc",
        "seed": 11,
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    return tmp_path, cfg_path


def _simulate(tmp_path, *extra, seed="5"):
    res = run_cli("--seed", seed, "--out", str(tmp_path), "simulate",
                  "--design", "replication", "--n", "400", "--selection-p", "0.4", *extra)
    assert res.exit_code == 0, res.output
    return tmp_path / "sim.csv", tmp_path / "sim_truth.json"


def test_simulate_fixed_seed_byte_identical(workdir):
    tmp, _ = workdir
    a_dir, b_dir = tmp / "a", tmp / "b"
    for d in (a_dir, b_dir):
        d.mkdir()
        res = run_cli("--seed", "9", "--out", str(d), "simulate", "--n", "200")
        assert res.exit_code == 0
    assert (a_dir / "sim.csv").read_bytes() == (b_dir / "sim.csv").read_bytes()
    assert (a_dir / "sim_truth.json").read_bytes() == (b_dir / "sim_truth.json").read_bytes()


def test_simulate_invalid_censoring_exits_2(workdir):
    tmp, _ = workdir
    res = run_cli("--out", str(tmp), "simulate", "--outcome", "weibull", "--censoring", "1.2")
    assert res.exit_code == 2
    assert "censoring" in res.output


def test_simulate_zero_error_measure_equals_truth(workdir):
    tmp, _ = workdir
    csv_path, truth_path = _simulate(tmp, "--sigma2-u", "0")
    ds = read_csv(csv_path)
    truth = json.loads(truth_path.read_text())
    assert np.allclose(ds.vals("xstar1"), np.asarray(truth["x_true"]), atol=1e-12)


def test_correct_zero_error_rc_equals_naive(workdir):
    tmp, cfg = workdir
    csv_path, _ = _simulate(tmp, "--sigma2-u", "0")
    res = run_cli("--config", str(cfg), "--out", str(tmp), "correct", str(csv_path),
                  "--method", "rc")
    assert res.exit_code == 0, res.output
    report = json.loads((tmp / "report.json").read_text())
    naive = report["methods"]["naive"]["rows"]["x"]["estimate"]
    rc = report["methods"]["rc"]["rows"]["x"]["estimate"]
    assert abs(naive - rc) < 1e-8
    notes = report["methods"]["rc"]["metadata"]["calibration"]["notes"]
    assert any("zero" in n for n in notes)


def test_correct_reports_are_reproducible(workdir):
    tmp, cfg = workdir
    csv_path, _ = _simulate(tmp, "--sigma2-u", "0.5")
    for stem in ("runa", "runb"):
        res = run_cli("--config", str(cfg), "--seed", "3", "--out", str(tmp), "correct",
                      str(csv_path), "--method", "mi", "--m", "5", "--stem", stem)
        assert res.exit_code == 0, res.output
    for suffix in (".json", ".csv", ".txt", "_forest.png"):
        a = (tmp / f"runa{suffix}").read_bytes()
        b = (tmp / f"runb{suffix}").read_bytes()
        assert a == b, f"mismatch for {suffix}"


def test_correct_unknown_method_exit_2(workdir):
    tmp, cfg = workdir
    csv_path, _ = _simulate(tmp)
    res = run_cli("--config", str(cfg), "--out", str(tmp), "correct", str(csv_path),
                  "--method", "nope")
    assert res.exit_code == 2


def test_correct_method_failure_exit_1(workdir, tmp_path):
    tmp, _ = workdir
    # calibration design with a single second-type measure: the conditional
    # normal MI route is unidentified -> method failure
    res = run_cli("--seed", "4", "--out", str(tmp), "simulate", "--design", "calibration",
                  "--systematic", "--theta1", "0.8", "--n", "300", "--n-second", "1")
    assert res.exit_code == 0
    cfg = {
        "design": {"type": "calibration", "columns": {"xstar": "xstar", "xstarstar": "xstarstar"}},
        "outcome": {"type": "linear", "y": "y", "covariates": ["z"], "exposure": "x"},
        "method": "mi",
        "method_options": {"mi_variant": "normal"},
        "seed": 4,
    }
    cfg_path = tmp / "calib.json"
    cfg_path.write_text(json.dumps(cfg))
    res = run_cli("--config", str(cfg_path), "--out", str(tmp), "correct", str(tmp / "sim.csv"))
    assert res.exit_code == 1
    assert "method failure" in res.output


def test_missing_config_exit_2(workdir):
    tmp, _ = workdir
    csv_path, _ = _simulate(tmp)
    res = run_cli("--out", str(tmp), "correct", str(csv_path), "--method", "rc")
    assert res.exit_code == 2


def test_validate_subcommand(workdir):
    tmp, cfg = workdir
    csv_path, _ = _simulate(tmp)
    res = run_cli("--config", str(cfg), "validate", str(csv_path))
    assert res.exit_code == 0 and "OK" in res.output
    # corrupt: make xstar2 present on an r=0 row
    lines = csv_path.read_text().splitlines()
    header = lines[0].split(",")
    i_r, i_x2 = header.index("r"), header.index("xstar2")
    for k in range(1, len(lines)):
        parts = lines[k].split(",")
        if parts[i_r] == "0":
            parts[i_x2] = "1.5"
            lines[k] = ",".join(parts)
            break
    bad = tmp / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    res = run_cli("--config", str(cfg), "validate", str(bad))
    assert res.exit_code == 2
    assert "measure-presence" in res.output


def test_compare_zero_error_identical_columns(workdir):
    tmp, cfg = workdir
    csv_path, _ = _simulate(tmp, "--sigma2-u", "0")
    res = run_cli("--config", str(cfg), "--out", str(tmp), "compare", str(csv_path),
                  "--methods", "naive,rc")
    assert res.exit_code == 0, res.output
    report = json.loads((tmp / "compare.json").read_text())
    a = report["methods"]["naive"]["rows"]["x"]["estimate"]
    b = report["methods"]["rc"]["rows"]["x"]["estimate"]
    assert abs(a - b) < 1e-8


def test_compare_partial_failure_keeps_other_columns(workdir):
    tmp, _ = workdir
    res = run_cli("--seed", "4", "--out", str(tmp), "simulate", "--design", "calibration",
                  "--systematic", "--theta1", "0.8", "--n", "400", "--n-second", "1")
    assert res.exit_code == 0
    cfg = {
        "design": {"type": "calibration", "columns": {"xstar": "xstar", "xstarstar": "xstarstar"}},
        "outcome": {"type": "linear", "y": "y", "covariates": ["z"], "exposure": "x"},
        "method_options": {"mi_variant": "normal"},
        "seed": 4,
    }
    cfg_path = tmp / "calib.json"
    cfg_path.write_text(json.dumps(cfg))
    res = run_cli("--config", str(cfg_path), "--out", str(tmp), "compare", str(tmp / "sim.csv"),
                  "--methods", "naive,rc,mi")
    assert res.exit_code == 0, res.output
    report = json.loads((tmp / "compare.json").read_text())
    assert report["methods"]["naive"]["ok"] and report["methods"]["rc"]["ok"]
    assert not report["methods"]["mi"]["ok"]
    assert "ERROR" in (tmp / "compare.txt").read_text()


def test_compare_with_truth_shows_bias_reduction(workdir):
    tmp, cfg = workdir
    csv_path, truth_path = _simulate(tmp, "--sigma2-u", "1.0", "--n", "2000")
    res = run_cli("--config", str(cfg), "--out", str(tmp), "compare", str(csv_path),
                  "--methods", "naive,rc", "--truth", str(truth_path))
    assert res.exit_code == 0, res.output
    report = json.loads((tmp / "compare.json").read_text())
    bias_naive = abs(report["methods"]["naive"]["bias"]["x"])
    bias_rc = abs(report["methods"]["rc"]["bias"]["x"])
    assert bias_naive > bias_rc


def test_env_var_output_dir(workdir, monkeypatch, tmp_path):
    tmp, cfg = workdir
    env_dir = tmp_path / "envout"
    monkeypatch.setenv("MEMISS_OUT", str(env_dir))
    res = run_cli("--seed", "5", "simulate", "--n", "100")
    assert res.exit_code == 0
    assert (env_dir / "sim.csv").exists()
