import json
import os

import numpy as np
import pytest

from maxplusnet.harness import ConfigError, ExperimentConfig, InitSpec, parse_config
from maxplusnet.harness.cli import main
from maxplusnet.harness.config import Dims, AuditSpec, OUT_DIR_ENV, load_config, loads_config
from maxplusnet.harness.experiments import (
    DATA,
    run_experiment,
    run_layer_position,
    run_maxplus_factorize,
    run_message_audit,
    run_recover_dilation,
)
from maxplusnet.harness.metrics import METRICS_COLUMNS, fmt
from maxplusnet.oracle import SeededSampler

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def test_defaults_and_init_forms():
    cfg = parse_config({"task": "recover-dilation"})
    assert (cfg.seed, cfg.dims, cfg.samples, cfg.steps, cfg.eta_max) == (0, Dims(8, 8, 4), 500, 2000, 1.0)
    assert cfg.init == InitSpec("zeros") and cfg.tie_tol == 0 and cfg.loss_aware
    assert parse_config({"task": "init-study", "init": "uniform(-2, -1)"}).init == InitSpec("uniform", a=-2, b=-1)
    assert parse_config({"task": "init-study", "init": {"mode": "gaussian", "sigma": 0.5}}).init.sigma == 0.5


@pytest.mark.parametrize("text, field, line", [
    ("task: recover-dilation\nsteps: -3\n", "steps", 2),
    ("task: recover-dilation\nseed: 1\nbogus: 4\n", "bogus", 3),
    ("task: teleport\n", "task", 1),
    ("task: recover-dilation\ndims: {n: 100, m: 2}\n", "dims.n", 2),
    ("task: recover-dilation\ninit: uniform(1, 0)\n", "init", 2),
    ("task: recover-dilation\neta_max: 0\n", "eta_max", 2),
])
def test_config_errors_name_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as err:
        loads_config(text)
    assert err.value.field == field and err.value.line == line
    assert f"line {line}" in str(err.value)


def test_malformed_yaml_reports_line():
    with pytest.raises(ConfigError) as err:
        loads_config("task: recover-dilation\nseed: [1,\n")
    assert err.value.line is not None


@pytest.mark.parametrize("name", sorted(os.listdir(CONFIGS)))
def test_shipped_configs_parse(name):
    assert load_config(os.path.join(CONFIGS, name)).task == name.removesuffix(".yaml")


def _w_star(seed, m, n):
    return SeededSampler(seed).spawn(DATA).uniform(-1.0, 1.0, (m, n))


def test_recover_from_truth_does_nothing():
    cfg = ExperimentConfig("recover-dilation", seed=3, dims=Dims(4, 5, 2), samples=50, steps=30)
    W = _w_star(3, 5, 4)
    res = run_recover_dilation(cfg, W0=W)
    s = res.summary
    assert s["initial_loss"] == s["final_loss"] == 0.0
    assert all(row.steps == [0.0] for row in res.tables["metrics.csv"].rows)
    assert np.array_equal(res.models["model.json"].layers[0].W, W)


def test_recover_descends_and_keeps_dead_weights():
    cfg = ExperimentConfig("recover-dilation", dims=Dims(6, 6, 2), samples=200, steps=300)
    s = run_recover_dilation(cfg).summary
    assert s["final_loss"] < s["initial_loss"]
    assert s["step_nonincreasing_fraction"] == 1.0
    assert s["dead_weights_unchanged"]


def test_factorize_one_by_one_is_exact():
    cfg = ExperimentConfig("maxplus-factorize", dims=Dims(1, 1, 1), samples=20, steps=5)
    s = run_maxplus_factorize(cfg, A0=[[0.0]], B0=[[0.0]], hidden=([[0.25]], [[-0.75]])).summary
    assert s["final_loss"] == 0.0 and s["learned_product"] == [[-0.5]]


def test_factorize_identity_start():
    big = -1e9
    I4 = np.full((4, 4), big)
    np.fill_diagonal(I4, 0.0)
    cfg = ExperimentConfig("maxplus-factorize", dims=Dims(4, 4, 4), samples=30, steps=3)
    s = run_maxplus_factorize(cfg, A0=I4, B0=I4, hidden=(I4, I4)).summary
    assert s["initial_loss"] == 0.0 and s["final_loss"] == 0.0


def test_factorize_emits_per_step_metrics():
    cfg = ExperimentConfig("maxplus-factorize", dims=Dims(4, 4, 4), samples=100, steps=200)
    res = run_maxplus_factorize(cfg)
    table = res.tables["metrics.csv"]
    assert table.header == METRICS_COLUMNS and len(table.rows) == 200
    assert all(len(r.gains) == 2 and len(r.vu) == 2 for r in table.rows)
    assert res.summary["final_loss"] < res.summary["initial_loss"]
    assert 0.0 <= res.summary["violation_rate"] <= 1.0


def test_layer_position_reports_both_arms():
    cfg = ExperimentConfig("layer-position", dims=Dims(4, 4, 2), samples=60, steps=60, seeds=2)
    s = run_layer_position(cfg).summary
    assert set(s["median_final_loss"]) == {"early", "late"}
    assert s["early_morph_param_violations"] == 0


def test_audit_populations():
    cfg = ExperimentConfig("message-audit", dims=Dims(6, 5, 2), audit=AuditSpec(10, 300, 2, 3))
    res = run_message_audit(cfg)
    pops = res.summary["populations"]
    assert pops["no-ties"]["cond2_violation_rate"] == 0.0
    assert pops["no-ties"]["cond3_violations"] == 0
    assert pops["degenerate"]["degenerate_rate"] == 1.0
    assert pops["ties"]["degenerate_rate"] == 0.0
    assert len(res.tables["metrics.csv"].rows) == 30


def test_metrics_format():
    assert fmt(0.1) == "0.1" and fmt(float("inf")) == "inf" and fmt(None) == ""
    assert fmt(True) == "1" and fmt([1.5, 2]) == "1.5;2"


def _write_cfg(tmp_path, text):
    path = tmp_path / "cfg.yaml"
    path.write_text(text)
    return str(path)


SMALL = "task: recover-dilation\ndims: {n: 3, m: 3}\nsamples: 40\nsteps: 25\n"


def test_cli_run_then_inspect(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", _write_cfg(tmp_path, SMALL), "--out-dir", str(out), "--quiet"]) == 0
    assert sorted(os.listdir(out)) == ["metrics.csv", "model.json", "summary.json"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["steps"] == 25 and summary["task"] == "recover-dilation"
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(METRICS_COLUMNS)
    capsys.readouterr()
    assert main(["inspect", str(out / "model.json")]) == 0
    text = capsys.readouterr().out
    weights = [line for line in text.splitlines() if line.strip().startswith("weights:")][0]
    saved = json.loads((out / "model.json").read_text())["layers"][0]["weights"]
    assert [float(v) for v in weights.split(":")[1].split()] == saved


def test_cli_is_deterministic(tmp_path):
    cfg = _write_cfg(tmp_path, SMALL)
    for d in ("a", "b"):
        assert main(["run", "--config", cfg, "--out-dir", str(tmp_path / d), "--quiet", "--seed", "4"]) == 0
    for name in ("metrics.csv", "model.json", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["run"]) == 1
    assert main(["run", _write_cfg(tmp_path, "task: recover-dilation\nsteps: zero\n")]) == 1
    assert "steps" in capsys.readouterr().err
    assert main(["inspect", str(tmp_path / "missing.json")]) == 1
    assert main(["verify", "--only", "x"]) == 1
    assert main(["verify", "--only", "42"]) == 1
    assert main(["frobnicate"]) == 1


def test_cli_verify_writes_report(tmp_path):
    assert main(["verify", "--only", "1,5", "--quiet", "--out-dir", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert rep["passed"] and len(rep["criteria"]) == 2


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "env"))
    cfg = parse_config({"task": "recover-dilation", "dims": {"n": 2, "m": 2}, "samples": 10, "steps": 5})
    _, paths = run_experiment(cfg)
    assert all(p.startswith(str(tmp_path / "env")) for p in paths)
    pinned = parse_config({"task": "recover-dilation", "steps": 5, "samples": 10, "output": {"dir": "here"}})
    assert pinned.out_dir() == "here"
