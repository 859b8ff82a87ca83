import json
import math
import warnings
from dataclasses import replace

import pytest

from moelab.estimator import FitConfig
from moelab.harness import (
    CSV_COLUMNS,
    ConfigError,
    ExperimentConfig,
    LossSpec,
    RateTarget,
    emit_report,
    estimate_slope,
    run_replicate,
    run_sweep,
    slopes_from_csv,
    standard_scenarios,
)


def small_config(**kw):
    base = dict(
        scenario="small", truth="softmax_ffn", k_fit=2, exact_specified=True, n_grid=(200, 400, 800), replicates=2,
        fit=FitConfig(k_fit=2, restarts=2, init_mode="mixed", max_iters=60, ftol=1e-9),
        losses=(LossSpec("L1"), LossSpec("param_worst"), LossSpec("regression_l2")),
        targets=(RateTarget("L1", "band", -0.5, (-0.65, -0.35)),), mc_points=2000, seed=5,
    )
    base.update(kw)
    return ExperimentConfig(**base)


# -- slopes


def test_slope_of_power_law():
    grid = [1e3, 3e3, 1e4, 3e4, 1e5]
    slope, _, r2 = estimate_slope([(n, 2.0 * n**-0.5) for n in grid])
    assert slope == pytest.approx(-0.5, abs=1e-12) and r2 == pytest.approx(1.0)
    assert estimate_slope([(n, 3.0) for n in grid])[0] == pytest.approx(0.0, abs=1e-12)


def test_slope_of_log_corrected_rate():
    grid = [1e3, 3e3, 1e4, 3e4, 1e5]
    slope, _, _ = estimate_slope([(n, (math.log(n) / n) ** 0.5) for n in grid])
    assert -0.5 < slope < -0.40


def test_slope_excludes_nonpositive_points():
    with pytest.warns(UserWarning):
        slope, _, _ = estimate_slope([(10, 0.0), (100, 0.1), (1000, 0.01)])
    assert slope == pytest.approx(-1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValueError):
            estimate_slope([(10, 0.0), (100, 0.1)])


def test_targets():
    band = RateTarget("L1", "band", -0.25, (-0.40, -0.15))
    assert band.check(-0.3) and not band.check(-0.5) and not band.check(float("nan"))
    slow = RateTarget("L2", "log-slow", threshold=-0.15)
    assert slow.check(-0.05) and not slow.check(-0.2)


# -- configuration


def test_config_rejects_unknown_keys():
    obj = small_config().to_json()
    obj["mystery"] = 1
    with pytest.raises(ConfigError, match="mystery"):
        ExperimentConfig.from_json(obj)
    obj = small_config().to_json()
    obj["fit"]["mystery"] = 1
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(obj)


def test_config_roundtrip():
    cfg = small_config()
    back = ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back == cfg and back.fingerprint() == cfg.fingerprint()


@pytest.mark.parametrize("bad", [dict(n_grid=(100,)), dict(n_grid=(200, 100)), dict(replicates=0),
                                 dict(k_fit=3, fit=FitConfig(k_fit=3)), dict(expert="linear"),
                                 dict(losses=(LossSpec("L4"),), targets=())])
def test_config_invariants(bad):
    with pytest.raises(ConfigError):
        small_config(**bad)


def test_standard_scenarios_cover_table():
    scenarios = standard_scenarios()
    assert len(scenarios) == 9
    for cfg in scenarios.values():
        assert cfg.n_grid == (1000, 3000, 10000, 30000, 100000) and cfg.replicates == 20
        assert cfg.noise_variance == 0.01 and cfg.truth_measure().d == 2


# -- replicates and sweeps


def test_zero_noise_warm_fit_recovers_truth():
    cfg = small_config(noise_variance=0.0, fit=FitConfig(k_fit=2, restarts=1, init_mode="warm"))
    rec = run_replicate(cfg, 300, 0)
    assert rec.losses["L1"][1] <= 1e-6


def test_replicates_are_deterministic_and_distinct():
    cfg = small_config()
    a, b, c = run_replicate(cfg, 200, 0), run_replicate(cfg, 200, 0), run_replicate(cfg, 200, 1)
    a.wall_ms = b.wall_ms = c.wall_ms = 0.0
    assert a == b
    assert a.losses["L1"] != c.losses["L1"]


def test_sweep_csv_schema_and_report(tmp_path):
    cfg = small_config()
    records, report = run_sweep(cfg, out_dir=tmp_path)
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert lines[0].split(",") == CSV_COLUMNS
    assert CSV_COLUMNS == "scenario,n,replicate,loss_name,r,loss_value,objective,converged,winner_start,wall_ms".split(",")
    assert len(lines) == 1 + 3 * 2 * 3
    rate = report.rate("L1")
    assert all(m >= 0 for m in rate.medians) and rate.target is not None
    assert "-0.500" in (tmp_path / "report.txt").read_text()
    again = slopes_from_csv(tmp_path / "results.csv")[0].rate("L1")
    assert again.slope == pytest.approx(rate.slope, rel=1e-12)


def test_sweep_is_byte_identical_across_threads(tmp_path):
    cfg = small_config(n_grid=(200, 300), replicates=2)
    run_sweep(cfg, threads=1, out_dir=tmp_path / "serial")
    run_sweep(cfg, threads=2, out_dir=tmp_path / "pool")
    run_sweep(cfg, threads=1, out_dir=tmp_path / "again")
    serial = (tmp_path / "serial" / "results.csv").read_bytes()
    assert serial == (tmp_path / "pool" / "results.csv").read_bytes()
    assert serial == (tmp_path / "again" / "results.csv").read_bytes()


def test_resume_skips_finished_records(tmp_path):
    cfg = small_config(n_grid=(200, 300), replicates=2)
    run_sweep(cfg, out_dir=tmp_path)
    full = (tmp_path / "results.csv").read_bytes()
    journal = tmp_path / "records.jsonl"
    lines = journal.read_text().splitlines()
    journal.write_text("\n".join(lines[:2]) + "\n")
    run_sweep(cfg, resume=True, out_dir=tmp_path)
    assert (tmp_path / "results.csv").read_bytes() == full
    with pytest.raises(ConfigError):
        run_sweep(replace(cfg, seed=99), resume=True, out_dir=tmp_path)


def test_unwritable_output_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        run_sweep(small_config(n_grid=(200, 300), replicates=1), out_dir=blocker / "sub")


def test_emit_report_paths(tmp_path):
    cfg = small_config(n_grid=(200, 300), replicates=1)
    records, report = run_sweep(cfg)
    paths = emit_report(report, records, tmp_path)
    assert json.loads(paths["json"].read_text())["scenario"] == "small"


def test_more_data_helps_on_identifiable_preset():
    cfg = small_config(n_grid=(200, 20000), replicates=3,
                       fit=FitConfig(k_fit=2, restarts=1, init_mode="warm", max_iters=200, ftol=1e-9))
    _, report = run_sweep(cfg)
    med = report.rate("L1").medians
    assert med[-1] < med[0]
