import json
from dataclasses import replace

import pytest

from dmia.experiment import (
    REPORT_SCHEMA,
    ExperimentConfig,
    calibrate_tau,
    dumps_report,
    load_report,
    recompute_p_bar,
    run_experiment,
    size_sweep_config,
)

from conftest import small_experiment


@pytest.fixture(scope="module")
def small_report():
    return run_experiment(small_experiment())


def test_report_schema(small_report):
    r = small_report
    assert r["schema"] == REPORT_SCHEMA and r["version"] == 1
    assert r["partial"] is False
    assert len(r["rounds"]) == 2 and len(r["kernels"]) == 2
    assert set(r["rounds"][0]) == {"negative", "rho=1", "rho=0.5", "rho=0.3"}
    assert "baseline" in r and "world_digest" in r
    assert r["conventions"]["loss"].startswith("minimize")


def test_p_bar_recomputable_from_indicators(small_report):
    for rnd in small_report["rounds"]:
        for rec in rnd.values():
            assert recompute_p_bar(rec) == pytest.approx(rec["p_bar"], abs=1e-15)
            assert rec["decision"] == int(rec["p_bar"] >= small_report["tau"])


def test_report_round_trips_through_json(small_report, tmp_path):
    p = tmp_path / "report.json"
    p.write_text(dumps_report(small_report))
    assert load_report(p) == json.loads(dumps_report(small_report))


def test_unknown_version_rejected(tmp_path):
    p = tmp_path / "r.json"
    p.write_text(json.dumps({"schema": REPORT_SCHEMA, "version": 2}))
    with pytest.raises(ValueError):
        load_report(p)


def test_calibrated_threshold_echoed():
    r = run_experiment(small_experiment(tau="calibrate", rounds=1, baseline=False,
                                        world=replace(small_experiment().world, n_nonmember=1600)))
    assert 0 < r["tau"] < 1
    assert r["calibration"]["tau"] == r["tau"]
    assert r["calibration"]["pool_size"] == 400


def test_calibrate_tau_separates_scores():
    t = calibrate_tau([0.9, 0.95, 0.8], [0.5, 0.55, 0.4])
    assert 0.55 < t <= 0.8


@pytest.mark.parametrize("kw", [dict(rounds=0), dict(tau=1.5), dict(ratios=[0.0]),
                                dict(nonmember_train=5000), dict(candidate_size=10**6)])
def test_invalid_configs_rejected(kw):
    with pytest.raises(ValueError):
        small_experiment(**kw)


def test_config_dict_round_trip():
    cfg = small_experiment(seed=4)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()


def test_size_sweep_scaling():
    cfg = size_sweep_config(60, seed=2, rounds=3)
    assert cfg.candidate_size == 60
    assert (cfg.nonmember_train, cfg.nonmember_detect) == (60, 120)
    assert cfg.detect.batch_size == cfg.train.batch_size == 30
    assert cfg.ratios == [1.0]
