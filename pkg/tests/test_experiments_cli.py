import csv
import json
import os

import pytest
import yaml

from mvsde import cli
from mvsde.config import parse_config
from mvsde.experiments import (
    AUDIT_COLUMNS,
    AVERAGING_COLUMNS,
    AVERAGING_SERIES_COLUMNS,
    ITO_COLUMNS,
    STABILITY_COLUMNS,
    TRAJECTORY_COLUMNS,
    averaging_verdicts,
    run_experiment,
)

OU = {"name": "linear_mean_field", "params": {"a": 1.0, "c": 0.5, "sigma": 0.3, "jump_scale": 0.1}}
JUMPS = {"rate": 1.0, "alpha": 1.0, "mark_law": "uniform_ball"}

SMALL = {
    "simulate": {
        "system": {"coefficients": OU, "jumps": JUMPS, "initial": 1.0},
        "solver": {"n_particles": 200, "step": 0.01, "horizon": 0.5, "seed": 3},
        "experiment": {"kind": "simulate"},
    },
    "averaging": {
        "system": {"coefficients": {"name": "sin2_mean_field", "params": {"a": 1.0, "sigma": 0.1}},
                   "initial": {"kind": "gaussian", "mean": 1.0, "std": 1.0}},
        "solver": {"n_particles": 500, "step": 0.01, "horizon": 1.0, "seed": 3,
                   "epsilons": [0.2, 0.05]},
        "experiment": {"kind": "averaging", "delta": 0.05},
    },
    "stability": {
        "system": {"coefficients": {"name": "linear_mean_field", "params": {"a": 1.0, "c": 0.25}},
                   "initial": 1.0},
        "solver": {"n_particles": 50, "step": 0.01, "horizon": 8.0, "seed": 3},
        "experiment": {"kind": "stability", "alpha": 1.5, "tail_window": 0.5, "delta": 0.01},
    },
    "ito_check": {
        "system": {"coefficients": OU, "jumps": JUMPS, "initial": 1.0},
        "solver": {"n_particles": 300, "step": 0.02, "horizon": 0.5, "seed": 3},
        "experiment": {"kind": "ito_check", "steps": [0.02, 0.01]},
    },
    "audits": {
        "system": {"operator": {"kind": "normal_cone", "set": {"kind": "box", "lo": [-1.0], "hi": [1.0]}},
                   "coefficients": {"name": "sin2_mean_field", "params": {"a": 1.0, "jump_scale": 0.1}},
                   "jumps": JUMPS},
        "solver": {"n_particles": 10, "step": 0.1, "horizon": 1.0, "seed": 3},
        "experiment": {"kind": "audits", "monotonicity_pairs": 200, "inherited_pairs": 50,
                       "T1": [62.83185307179586, 6.283185307179586], "n_quad": 400,
                       "isometry_trials": 2000},
    },
}

GOLDEN = {
    "simulate": ["t", "mean_sq", "mean_sq_se", "sup_mean_sq", "k_variation_mean"],
    "averaging": ["epsilon", "D_T", "D_T_se", "ci_lo", "ci_hi", "chebyshev_delta", "chebyshev_bound"],
    "stability": ["criterion", "parameters", "value", "margin", "verdict"],
    "ito_check": ["step", "R_T", "R_T_se", "z"],
    "audits": ["audit", "statistic", "value", "threshold", "verdict"],
}


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_column_constants_match_golden():
    assert list(TRAJECTORY_COLUMNS) == GOLDEN["simulate"]
    assert list(AVERAGING_COLUMNS) == GOLDEN["averaging"]
    assert list(STABILITY_COLUMNS) == GOLDEN["stability"]
    assert list(ITO_COLUMNS) == GOLDEN["ito_check"]
    assert list(AUDIT_COLUMNS) == GOLDEN["audits"]
    assert list(AVERAGING_SERIES_COLUMNS) == ["t", "D", "D_se"]


@pytest.mark.parametrize("kind", sorted(SMALL))
def test_summary_schema_and_provenance(kind, tmp_path):
    cfg = parse_config(SMALL[kind])
    report = run_experiment(cfg, str(tmp_path))
    rows = read_csv(tmp_path / "summary.csv")
    assert rows[0] == GOLDEN[kind]
    assert len(rows) - 1 == len(report.rows) > 0
    meta = json.loads((tmp_path / "report.json").read_text())
    assert meta["provenance"] == {"config_hash": cfg.digest(), "seed": 3, "version": "0.1.0"}
    assert meta["kind"] == kind
    for path in report.csv_paths:
        assert os.path.exists(path)


def test_trajectory_csv_columns(tmp_path):
    run_experiment(parse_config(SMALL["simulate"]), str(tmp_path))
    rows = read_csv(tmp_path / "trajectory.csv")
    assert rows[0] == GOLDEN["simulate"] + ["mean_0"]
    assert len(rows) == 1 + 51


def test_averaging_series_and_verdicts(tmp_path):
    report = run_experiment(parse_config(SMALL["averaging"]), str(tmp_path))
    series = read_csv(tmp_path / "averaging_eps_0.2.csv")
    assert series[0] == ["t", "D", "D_se"]
    assert report.rows[0]["D_T"] > report.rows[1]["D_T"]
    assert report.passed


def test_averaging_verdict_logic():
    def row(d, se):
        return {"D_T": d, "ci_lo": d - 1.96 * se, "ci_hi": d + 1.96 * se}

    assert averaging_verdicts([row(1.0, 0.1), row(0.5, 0.1), row(0.05, 0.01)]) == (True, True, 0.05)
    dec, sep, _ = averaging_verdicts([row(1.0, 0.5), row(1.1, 0.1), row(0.6, 0.5)])
    assert not dec and not sep


def test_stability_rows(tmp_path):
    report = run_experiment(parse_config(SMALL["stability"]), str(tmp_path))
    names = [r["criterion"] for r in report.rows]
    assert names == ["exp_ms_fit", "exp_ms_envelope", "ultimate_bound", "as_tail",
                     "lyapunov_generator", "lyapunov_sandwich", "lyapunov_k_pairing"]
    assert report.passed


def test_audit_defect_trend_rows(tmp_path):
    report = run_experiment(parse_config(SMALL["audits"]), str(tmp_path))
    defects = [r for r in report.rows if r["audit"].startswith("averaging_defect")]
    assert defects[0]["audit"] == "averaging_defect_T1=6.283185307179586"
    assert all(r["verdict"] for r in defects)
    assert report.passed


def test_reports_identical_across_thread_counts(tmp_path):
    outs = []
    for threads in (1, 3):
        doc = yaml.safe_load(yaml.safe_dump(SMALL["simulate"]))
        doc["solver"]["threads"] = threads
        out = tmp_path / f"t{threads}"
        run_experiment(parse_config(doc), str(out))
        outs.append(((out / "summary.csv").read_bytes(), (out / "trajectory.csv").read_bytes()))
    assert outs[0] == outs[1]


def write_config(tmp_path, doc, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_cli_success_and_out_override(tmp_path, monkeypatch, capsys):
    path = write_config(tmp_path, SMALL["simulate"])
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "from_env"))
    assert cli.main(["simulate", "--config", path]) == cli.EXIT_OK
    assert (tmp_path / "from_env" / "summary.csv").exists()
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path / "flag"), "--seed", "9",
                     "--threads", "2"]) == cli.EXIT_OK
    meta = json.loads((tmp_path / "flag" / "report.json").read_text())
    assert meta["provenance"]["seed"] == 9
    assert "summary.csv" in capsys.readouterr().out


def test_cli_config_error_exit_code(tmp_path, capsys):
    doc = yaml.safe_load(yaml.safe_dump(SMALL["simulate"]))
    doc["system"]["operator"] = {"kind": "polytope"}
    path = write_config(tmp_path, doc)
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "unknown operator kind 'polytope'" in capsys.readouterr().err
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    assert cli.main(["audit", "--config", path]) == cli.EXIT_CONFIG


def test_cli_blow_up_exit_code(tmp_path, capsys):
    doc = {"system": {"coefficients": {"name": "linear_mean_field", "params": {"a": -50.0}},
                      "initial": 1.0},
           "solver": {"n_particles": 3, "step": 0.1, "horizon": 5.0},
           "experiment": {"kind": "simulate"}}
    path = write_config(tmp_path, doc)
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path)]) == cli.EXIT_BLOWUP
    assert "blow-up" in capsys.readouterr().err


def test_cli_strict_mode_exit_code(tmp_path):
    doc = yaml.safe_load(yaml.safe_dump(SMALL["stability"]))
    doc["experiment"]["alpha"] = 3.0
    path = write_config(tmp_path, doc)
    out = str(tmp_path / "o")
    assert cli.main(["stability", "--config", path, "--out", out]) == cli.EXIT_OK
    assert cli.main(["stability", "--config", path, "--out", out, "--strict"]) == cli.EXIT_CRITERION
