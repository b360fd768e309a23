"""Experiment runner and command-line interface."""

import csv
import json
import os

import numpy as np
import pytest

from sblab.cli import main
from sblab.experiments import (
    ConfigError,
    RunConfig,
    run_ode_vs_simulation,
    run_theory_suite,
)
from sblab.upsampler import export_trajectories

from planted import planted_corpus

SMOKE = {
    "run_id": "smoke",
    "spectrum": {"geometric": {"d": 2, "gamma": 0.5}},
    "n_ctx": 8,
    "n_heads": 2,
    "seeds": [0],
    "gd": {"steps": 10, "log_every": 5, "snapshot_every": 5, "eval_size": 50},
    "sam": {"steps": 10, "log_every": 5, "snapshot_every": 5, "eval_size": 50},
    "gd_upsampled": {"steps": 10, "log_every": 5, "snapshot_every": 5, "eval_size": 50},
    "dataset": {"size": 60},
    "upsample": {"n_checkpoints": 2},
}


def _config(tmp_path, obj=SMOKE, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def _read_all(d):
    return {name: (d / name).read_bytes() for name in sorted(os.listdir(d)) if not name.startswith(".")}


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("SB_LAB_OUT", raising=False)
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)


def test_fig1_smoke_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["fig1", "--config", _config(tmp_path), "--out", str(out)]) == 0
    files = set(_read_all(out))
    assert files == {
        "smoke_gd_0.csv",
        "smoke_sam_0.csv",
        "smoke_gd_upsampled_0.csv",
        "smoke_long.csv",
        "smoke_summary.json",
    }
    with open(out / "smoke_gd_0.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:2] == ["step", "loss"]
    summary = json.loads((out / "smoke_summary.json").read_text())
    assert set(summary["arms"]) == {"gd", "sam", "gd_upsampled"}
    assert summary["config_hash"] == RunConfig.from_dict(SMOKE).config_hash()


def test_fig1_rerun_is_byte_identical(tmp_path):
    cfg = _config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["fig1", "--config", cfg, "--out", str(a)]) == 0
    assert main(["fig1", "--config", cfg, "--out", str(b)]) == 0
    assert _read_all(a) == _read_all(b)


def test_summary_medians_match_runs(tmp_path):
    obj = dict(SMOKE, seeds=[0, 1, 2])
    out = tmp_path / "out"
    assert main(["fig1", "--config", _config(tmp_path, obj), "--out", str(out)]) == 0
    summary = json.loads((out / "smoke_summary.json").read_text())
    for arm, row in summary["arms"].items():
        losses = [r["final_test_loss"] for r in row["runs"]]
        assert len(losses) == 3
        assert row["median_test_loss"] == pytest.approx(float(np.median(losses)), rel=0, abs=0)


def test_source_date_epoch_timestamp(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    out = tmp_path / "out"
    assert main(["fig1", "--config", _config(tmp_path), "--out", str(out)]) == 0
    summary = json.loads((out / "smoke_summary.json").read_text())
    assert summary["timestamp"].startswith("1970-01-01")


def test_unknown_field_exit_2(tmp_path, capsys):
    cfg = _config(tmp_path, dict(SMOKE, bogus=1))
    assert main(["fig1", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_bad_value_exit_2(tmp_path):
    cfg = _config(tmp_path, dict(SMOKE, n_heads=0))
    assert main(["fig1", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    bad_arm = dict(SMOKE, gd={"steps": 10, "nonsense": 3})
    assert main(["fig1", "--config", _config(tmp_path, bad_arm, "b.json"), "--out", str(tmp_path / "o")]) == 2


def test_invalid_json_exit_2(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["fig1", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_divergence_exit_1_without_partial_outputs(tmp_path, capsys):
    obj = dict(SMOKE, gd={"steps": 200, "learning_rate": 1e6, "log_every": 5, "snapshot_every": 5, "eval_size": 50})
    out = tmp_path / "out"
    assert main(["fig1", "--config", _config(tmp_path, obj), "--out", str(out)]) == 1
    err = capsys.readouterr().err
    assert "gd" in err and "seed 0" in err
    assert _read_all(out) == {}
    assert os.listdir(out) == []


def test_simulate_writes_trace_and_report(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", _config(tmp_path), "--arm", "sam", "--seed", "3", "--out", str(out)]) == 0
    assert (out / "smoke_sam_3.csv").exists()
    rep = json.loads((out / "smoke_sam_3.json").read_text())
    assert rep["arm"] == "sam" and rep["seed"] == 3


def test_sb_lab_out_overrides(tmp_path, monkeypatch):
    env_out = tmp_path / "env"
    monkeypatch.setenv("SB_LAB_OUT", str(env_out))
    assert main(["fig1", "--config", _config(tmp_path), "--out", str(tmp_path / "ignored")]) == 0
    assert "smoke_summary.json" in _read_all(env_out)
    assert not (tmp_path / "ignored").exists()


# -- theory and ODE check ------------------------------------------------------


def test_theory_small_grid_with_skipped_cells(tmp_path):
    grid = {"d": [2, 3], "n_spectra": 4, "eps": [0.02], "rho_fraction": [0.5, 1.5]}
    rep = run_theory_suite(grid)
    assert rep["cells"] == 16
    assert rep["precondition_skipped"] == 8
    assert rep["checks"]["entropy_inequality"] == {"pass": 8, "fail": 0}
    assert rep["ok"]


def test_theory_cli_writes_csvs(tmp_path):
    grid = {"d": [2], "n_spectra": 3, "eps": [0.02], "rho_fraction": [0.5, 1.5]}
    out = tmp_path / "th"
    assert main(["theory", "--config", _config(tmp_path, grid), "--out", str(out)]) == 0
    with open(out / "theory_cells.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert sum(r["status"] == "precondition-skipped" for r in rows) == 3
    assert all(float(r["H_sam"]) > float(r["H_gd"]) for r in rows if r["status"] == "ok")
    with open(out / "theory_paths.csv") as fh:
        paths = list(csv.DictReader(fh))
    assert {p["arm"] for p in paths} == {"gd", "sam"}
    # every path starts at eps and grows
    for arm in ("gd", "sam"):
        v = [float(p["v"]) for p in paths if p["arm"] == arm and p["feature"] == "1"]
        assert v[0] == pytest.approx(0.05)
        assert np.all(np.diff(v) > 0)


def test_theory_empty_grid_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        run_theory_suite({"eps": []})
    assert main(["theory", "--config", _config(tmp_path, {"d": []}), "--out", str(tmp_path / "o")]) == 2
    assert main(["theory", "--config", _config(tmp_path, {"bogus": 1}, "b.json"), "--out", str(tmp_path / "o")]) == 2


SMALL_ODE = {"spectrum": {"eigenvalues": [1.0, 0.5]}, "n_ctx": 16, "eps": 0.02, "rho": 0.008, "c": 0.5, "eta": 0.02}


def test_ode_check_small():
    rep = run_ode_vs_simulation(SMALL_ODE)
    assert rep["ok"], rep["rows"]
    assert {r["arm"] for r in rep["rows"]} == {"gd", "sam"}


def test_ode_check_rho_zero_sam_equals_gd():
    rep = run_ode_vs_simulation(dict(SMALL_ODE, rho=0.0))
    gd = {r["feature"]: r for r in rep["rows"] if r["arm"] == "gd"}
    sam = {r["feature"]: r for r in rep["rows"] if r["arm"] == "sam"}
    for f in gd:
        assert sam[f]["max_rel_err"] == gd[f]["max_rel_err"]


def test_ode_check_cli(tmp_path):
    out = tmp_path / "ode"
    assert main(["ode-check", "--config", _config(tmp_path, SMALL_ODE), "--out", str(out)]) == 0
    assert json.loads((out / "ode_check.json").read_text())["ok"]


# -- upsampling and metrics commands ------------------------------------------------


def test_cluster_upsample_roundtrip(tmp_path):
    trajs, hard = planted_corpus(n=200, seed=1)
    inp = tmp_path / "traj.jsonl"
    export_trajectories(trajs, str(inp))
    plan_path = tmp_path / "plan.json"
    assert main(["cluster", "--in", str(inp), "--out", str(plan_path), "--factor", "3"]) == 0
    plan = json.loads(plan_path.read_text())
    hard_ids = {r["id"] for r in plan["assignments"] if r["cluster"] == "hard"}
    assert len(hard_ids) == int(hard.sum())
    again = tmp_path / "plan2.json"
    assert main(["cluster", "--in", str(inp), "--out", str(again), "--factor", "3"]) == 0
    assert plan_path.read_bytes() == again.read_bytes()

    re = tmp_path / "re.json"
    assert main(["upsample", "--plan", str(plan_path), "--factor", "2", "--mode", "weight", "--out", str(re)]) == 0
    new = json.loads(re.read_text())
    assert new["factor"] == 2 and new["mode"] == "weight"
    assert sum(r["weight"] for r in new["assignments"]) == pytest.approx(200 + int(hard.sum()))


def test_cluster_rejects_bad_input(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "losses": [1.0, 0.5]}\n{"id": "b", "losses": [1.0]}\n')
    assert main(["cluster", "--in", str(bad), "--out", str(tmp_path / "p.json")]) == 2
    assert main(["upsample", "--plan", str(tmp_path / "missing.json"), "--factor", "2"]) == 2


def test_metrics_on_simulated_trace(tmp_path, capsys):
    cfg = _config(tmp_path)
    out = tmp_path / "sim"
    assert main(["simulate", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
    capsys.readouterr()
    rep_path = tmp_path / "m.json"
    assert main(["metrics", "--in", str(out / "smoke_gd_0.csv"), "--config", cfg, "--out", str(rep_path)]) == 0
    rep = json.loads(rep_path.read_text())
    assert set(rep) >= {"times", "entropy", "M", "drop_steps"}
    assert len(rep["times"]) == 2
