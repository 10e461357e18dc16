import json
import os
import subprocess
import sys

import numpy as np
import pytest

from exfilt import config as config_mod
from exfilt.cli import EXIT_BUDGET, EXIT_CONFIG, EXIT_OK, main
from exfilt.errors import ConfigError
from exfilt.nn import load_model
from exfilt.oracle import LabelOracle, RemoteOracle, serve

TINY = {
    "dataset": {"synthetic": {"n_features": 14, "n_classes": 3, "n_rows": 500, "class_sep": 0.5}},
    "split": {"train_size": 160, "aux_size": 20, "neutral_size": 100, "mem_members": 20, "mem_nonmembers": 20},
    "target": {"epochs": 20, "hidden": 12, "batch_size": 32},
    "extraction": {"B": 40, "alpha": 4},
    "mia": {"method": "whitebox_margin", "n_cal": 10},
    "budgets": [40, 80],
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def run(*args):
    return main([str(a) for a in args])


def test_overrides_and_seeds(cfg_file):
    cfg = config_mod.load(cfg_file, ["target.epochs=3", "mia.method=\"exhaustive\"", "budgets=[40,50]"])
    assert cfg.target.epochs == 3 and cfg.mia.method == "exhaustive" and cfg.budgets == [40, 50]
    assert cfg.seed("a") != cfg.seed("b") and cfg.seed("a") == config_mod.load(cfg_file).seed("a")
    assert cfg.fingerprint() != config_mod.load(cfg_file).fingerprint()


@pytest.mark.parametrize("bad", [["budgets=[50,40]"], ["target.nope=1"], ["mia.method=\"exhaustive\"",
                                                                             "dataset.synthetic.n_features=30"]])
def test_config_errors(cfg_file, bad):
    with pytest.raises(ConfigError):
        config_mod.load(cfg_file, bad)


def test_missing_paths_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        config_mod.load(tmp_path / "nope.json")
    doc = dict(TINY, dataset={"csv": "missing.csv", "schema": {"n_features": 14, "n_classes": 3}})
    with pytest.raises(ConfigError):
        config_mod.build(doc, base_dir=tmp_path)


def test_rounds_scale_batch_and_alpha(cfg_file):
    cfg = config_mod.load(cfg_file, ["rounds=4"])
    ext = cfg.extraction_for(20 + 400)
    assert ext.n_round * 4 >= 400 and ext.alpha * 20 >= ext.B
    assert config_mod.load(cfg_file).extraction_for(100).B == 40


def test_staged_pipeline(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("train-target", "--config", cfg_file, "--output", out, "--quiet") == EXIT_OK
    assert "train accuracy" in capsys.readouterr().out
    first = (out / "target.mlp").read_bytes()
    assert run("train-target", "--config", cfg_file, "--output", out, "--quiet") == EXIT_OK
    assert (out / "target.mlp").read_bytes() == first

    assert run("report", "--config", cfg_file, "--output", out, "--quiet") == EXIT_CONFIG
    assert "run `exfilt" in capsys.readouterr().err

    for b in (40, 80):
        assert run("extract", "--config", cfg_file, "--output", out, "--budget", b, "--quiet") == EXIT_OK
    hist = [json.loads(x) for x in (out / "history_surrogate_80.jsonl").read_text().splitlines()]
    assert hist[-1]["spent"] == 80 and len(hist) == 1 + 60 // 10
    assert run("mia", "--config", cfg_file, "--output", out, "--quiet") == EXIT_OK
    for b in (40, 80):
        assert run("mia", "--config", cfg_file, "--output", out, "--budget", b, "--quiet") == EXIT_OK
    assert json.loads((out / "mia_surrogate_80.json").read_text())["source"] == "calibrated"
    assert run("report", "--config", cfg_file, "--output", out, "--quiet") == EXIT_OK
    table = (out / "table2.csv").read_text()
    assert run("report", "--config", cfg_file, "--output", out, "--quiet") == EXIT_OK
    assert (out / "table2.csv").read_text() == table
    assert table.count("\n") == 4
    assert (out / "roc_surrogate_40.csv").exists() and (out / "roc_target.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert {"train-target", "extract-40", "extract-80", "report"} <= set(manifest["stages"])
    assert manifest["stages"]["train-target"]["artifacts"]["target.mlp"]

    assert run("mia", "--config", cfg_file, "--output", out, "--budget", 80, "--tau", 1.2, "--quiet") == EXIT_OK
    side = json.loads((out / "mia_surrogate_80.json").read_text())
    assert side["source"] == "manual" and side["tau"] == 1.2


def test_cli_guards(cfg_file, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("train-target", "--config", tmp_path / "missing.json", "--output", out) == EXIT_CONFIG
    assert "usage" in capsys.readouterr().err
    run("train-target", "--config", cfg_file, "--output", out, "--quiet")
    assert run("extract", "--config", cfg_file, "--output", out, "--budget", 5, "--quiet") == EXIT_CONFIG
    big = tmp_path / "big.json"
    big.write_text(json.dumps(dict(TINY, dataset={"synthetic": dict(TINY["dataset"]["synthetic"], n_features=30)})))
    run("train-target", "--config", big, "--output", tmp_path / "b", "--quiet")
    assert run("mia", "--config", big, "--output", tmp_path / "b", "--method", "exhaustive") == EXIT_CONFIG


def test_output_dir_from_environment(cfg_file, tmp_path, monkeypatch):
    monkeypatch.setenv("EXFILT_OUTPUT_DIR", str(tmp_path / "env"))
    assert run("synth-data", "--config", cfg_file, "--quiet") == EXIT_OK
    assert (tmp_path / "env" / "synthetic.csv").exists()
    monkeypatch.delenv("EXFILT_OUTPUT_DIR")
    assert run("synth-data", "--config", cfg_file, "--quiet") == EXIT_CONFIG


def test_seed_flag_changes_master_seed(cfg_file, tmp_path):
    run("train-target", "--config", cfg_file, "--output", tmp_path / "a", "--seed", 1, "--quiet")
    run("train-target", "--config", cfg_file, "--output", tmp_path / "b", "--seed", 2, "--quiet")
    assert (tmp_path / "a" / "target.mlp").read_bytes() != (tmp_path / "b" / "target.mlp").read_bytes()


def test_extract_over_remote_oracle_matches_in_process(cfg_file, tmp_path):
    local, remote = tmp_path / "local", tmp_path / "remote"
    run("train-target", "--config", cfg_file, "--output", local, "--quiet")
    run("train-target", "--config", cfg_file, "--output", remote, "--quiet")
    assert run("extract", "--config", cfg_file, "--output", local, "--budget", 80, "--quiet") == EXIT_OK
    cfg = config_mod.load(cfg_file)
    server = serve(LabelOracle(load_model(remote / "target.mlp"), cfg.schema, budget=80)).start()
    try:
        assert run("extract", "--config", cfg_file, "--output", remote, "--budget", 80,
                   "--oracle-url", server.url, "--quiet") == EXIT_OK
        assert RemoteOracle(server.url).spent == 80
    finally:
        server.stop()
    assert (local / "surrogate_80.mlp").read_bytes() == (remote / "surrogate_80.mlp").read_bytes()


def test_budget_exhaustion_exit_code(cfg_file, tmp_path):
    out = tmp_path / "x"
    run("train-target", "--config", cfg_file, "--output", out, "--quiet")
    cfg = config_mod.load(cfg_file)

    class Stingy(LabelOracle):
        # Advertises more than it will honour, so the client hits a 429 mid-run.
        def status(self):
            st = super().status()
            st["remaining"] = 1000
            return st

    server = serve(Stingy(load_model(out / "target.mlp"), cfg.schema, budget=50)).start()
    try:
        code = run("extract", "--config", cfg_file, "--output", out, "--budget", 80, "--oracle-url", server.url,
                   "--quiet")
    finally:
        server.stop()
    assert code == EXIT_BUDGET
    assert (out / "surrogate_80.mlp").exists()


def test_serve_subcommand(cfg_file, tmp_path):
    out = tmp_path / "s"
    run("train-target", "--config", cfg_file, "--output", out, "--quiet")
    port = 18000 + os.getpid() % 1000
    proc = subprocess.Popen([sys.executable, "-m", "exfilt", "serve", "--config", str(cfg_file), "--output",
                             str(out), "--port", str(port), "--budget", "7", "--quiet"],
                            stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        assert "serving target" in line
        client = RemoteOracle(f"http://127.0.0.1:{port}")
        assert len(client.query(np.zeros((7, 14)))) == 7 and client.remaining() == 0
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_zero_extra_budget_runs_clean(cfg_file, tmp_path):
    out = tmp_path / "z"
    cfg = config_mod.load(cfg_file, ["budgets=[20]", f"output_dir=\"{out}\""])
    from exfilt.evaluation import run_experiment
    res = run_experiment(cfg)
    rep = res.surrogate_reports[0]
    assert rep.queries_spent == 20 and rep.rounds == 0
    assert all(np.isfinite([rep.fidelity_to_target, rep.attack_auc, rep.attack_accuracy]))
    doc = json.loads((out / "report_target.json").read_text())
    assert doc["config_fingerprint"] == cfg.fingerprint() and "20" in doc["seeds"]["extraction"]
    with pytest.raises(ConfigError):
        run_experiment(config_mod.load(cfg_file, ["budgets=[19]"]))
