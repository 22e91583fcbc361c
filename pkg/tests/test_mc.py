import json
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from msmpsw.mc import McConfig, aggregate, method_label, run_mc, run_replication, scenario_defaults


@pytest.fixture(scope="module")
def small():
    cfg = McConfig(scenario="s1", reps=12, n=1500, seed=3, calibrate_m=2)
    return cfg, run_mc(cfg)


def test_labels():
    assert method_label("ztest", 0.05) == "ztest05"
    assert method_label("pztest", 0.2) == "pztest20"


def test_unknown_scenario():
    with pytest.raises(ValueError):
        scenario_defaults("s7")
    with pytest.raises(ValueError):
        run_mc(McConfig(reps=0))


def test_selection_rows_sum_to_one(small):
    cfg, report = small
    assert set(report.selection) == {"ztest05", "ztest20", "pztest05", "pztest20"}
    for probs in report.selection.values():
        assert len(probs) == 4
        assert abs(sum(probs) - 1) <= 1 / cfg.reps


def test_rmse_identity(small):
    _, report = small
    assert ("ztest05", "PSW_SW") in report.estimation
    assert ("pztest05", "PSW_SW") not in report.estimation
    for row in report.estimation.values():
        assert_allclose(row["rmse"] ** 2, row["bias"] ** 2 + row["se"] ** 2, rtol=1e-10)
        assert 0 <= row["cp"] <= 1


def test_calibration_recorded(small):
    cfg, report = small
    assert report.calibration["m"] == 2 and report.calibration["count"] == cfg.reps


def test_replication_order_independence(small):
    cfg, report = small
    order = np.random.default_rng(0).permutation(cfg.reps)
    results = [run_replication(cfg, int(r)) for r in order]
    shuffled = aggregate(cfg, results)
    assert shuffled.selection == report.selection
    assert shuffled.estimation == report.estimation


def test_thread_count_independence(small):
    cfg, report = small
    par = run_mc(replace(cfg, threads=2))
    assert par.selection == report.selection
    assert par.estimation == report.estimation


def test_single_replication_schema(tmp_path):
    report = run_mc(McConfig(scenario="s2", reps=1, n=800))
    assert all(row["se"] == 0.0 for row in report.estimation.values())
    paths = report.write(str(tmp_path), "csv")
    assert len(paths) == 3
    doc = json.loads(open(paths[0]).read())
    assert doc["reps"] == 1 and doc["scenario"] == "s2"
    assert {"method", "weight", "bias", "se", "rmse", "cp", "used"} <= set(doc["estimation"][0])
    head = open(paths[1]).readline().strip()
    assert head == "method,m=1,m=2,m=3,m=4"


@pytest.mark.filterwarnings("ignore::msmpsw.ipw.PositivityWarning")
def test_failed_replications_are_counted():
    # a tiny sample leaves some arms empty; failures are logged, not raised
    report = run_mc(McConfig(scenario="s1", reps=6, n=12, seed=1))
    assert report.reps == 6
    for probs in report.selection.values():
        assert sum(probs) <= 1 + 1e-12
    assert report.failures
    assert all(row["used"] <= 6 for row in report.estimation.values())


def test_scenario_defaults_resolve():
    cfg = McConfig(scenario="surv").resolved()
    assert cfg.max_m == 10 and cfg.model_form == "main_effect" and cfg.spec.num_lags == 1
    cfg = McConfig(scenario="s3", adjusted=True, true_weights=True).resolved()
    assert cfg.spec.adjust_L0 and cfg.spec.true_denominators and cfg.pair_variance == "sum"
