import json

import pytest

from moelab.cli import main
from moelab.harness import CSV_COLUMNS
from test_harness import small_config


@pytest.fixture
def config_file(tmp_path):
    cfg = small_config(n_grid=(200, 300), replicates=2)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_json()))
    return path


def test_simulate_writes_dataset(tmp_path, config_file):
    out = tmp_path / "d.csv"
    assert main(["simulate", "--config", str(config_file), "--n", "50", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "x_0,x_1,y" and len(lines) == 51


def test_fit_writes_json(tmp_path, config_file):
    out = tmp_path / "fit.json"
    assert main(["fit", "--config", str(config_file), "--n", "200", "--out", str(out)]) == 0
    obj = json.loads(out.read_text())
    assert {"objective", "fitted", "losses", "winner_start"} <= set(obj)


def test_sweep_and_slope(tmp_path, config_file, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(config_file), "--out", str(out)]) == 0
    header = (out / "results.csv").read_text().splitlines()[0]
    assert header.split(",") == CSV_COLUMNS
    assert main(["sweep", "--config", str(config_file), "--out", str(out), "--resume"]) == 0
    assert main(["slope", str(out / "results.csv")]) == 0
    assert "L1" in capsys.readouterr().out


def test_sweep_seed_override(tmp_path, config_file):
    assert main(["sweep", "--config", str(config_file), "--out", str(tmp_path / "a"), "--seed", "7"]) == 0
    stamp = json.loads((tmp_path / "a" / "config.json").read_text())
    assert stamp["config"]["seed"] == 7


def test_unknown_config_key_is_fatal(tmp_path, config_file, capsys):
    obj = json.loads(config_file.read_text())
    obj["extra"] = True
    config_file.write_text(json.dumps(obj))
    assert main(["sweep", "--config", str(config_file), "--out", str(tmp_path / "x")]) == 2
    assert "extra" in capsys.readouterr().err
    bad = tmp_path / "check.json"
    bad.write_text(json.dumps({"experts": ["linear"], "typo": 1}))
    assert main(["check", "--config", str(bad)]) == 2


def test_check_and_counterexample(tmp_path, capsys):
    cfg = tmp_path / "check.json"
    cfg.write_text(json.dumps({"experts": ["ffn-tanh", "linear"], "pairs": [["sigmoid", "ffn-tanh"]], "seeds": [0]}))
    assert main(["check", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "check.json").read_text())
    assert report["strong_identifiability"]["ffn-tanh"]["independent"] == [True]
    assert report["strong_identifiability"]["linear"]["independent"] == [False]
    cx = tmp_path / "cx.json"
    cx.write_text(json.dumps({"mc_points": 10000, "r": [1.0]}))
    assert main(["counterexample", "--config", str(cx), "--out", str(tmp_path / "cx")]) == 0
    assert (tmp_path / "cx" / "linear_expert_r1.csv").exists()


def test_needs_config_or_scenario(capsys):
    assert main(["sweep"]) == 2
    assert main(["sweep", "--scenario", "nope"]) == 2
