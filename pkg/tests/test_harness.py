import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odflow.core import ShapeMismatch, SlotIndex
from odflow.harness import (
    ExperimentConfig,
    HistoricalAverage,
    NoHistory,
    desk_experiment,
    ha_baseline,
    mean_and_stderr,
    metrics,
    run_pipeline,
    summarize_reports,
    write_pair_csv,
)
from odflow.ingestion import build_slot_tensors
from odflow.training import TrainSchedule


def test_metrics_identity_and_offset():
    t = np.arange(18.0).reshape(2, 3, 3)
    m = metrics(t, t)
    assert (m.mae, m.rmse, m.wmape) == (0.0, 0.0, 0.0)
    m = metrics(t + 1, t)
    assert m.mae == 1.0 and m.rmse == 1.0
    assert m.wmape == 18 / t.sum()
    m = metrics(t - 1, t)
    assert m.mae == 1.0


def test_metrics_hand_values():
    m = metrics(np.array([[1.0, 4.0]]), np.array([[2.0, 2.0]]))
    assert m.mae == 1.5
    assert m.rmse == pytest.approx(np.sqrt(2.5), rel=1e-15)
    assert m.wmape == 0.75
    assert metrics(np.ones((2, 2)), np.zeros((2, 2))).wmape is None
    with pytest.raises(ShapeMismatch):
        metrics(np.ones((2, 2)), np.ones((2, 3)))


def test_metrics_per_slot():
    t = np.ones((3, 2, 2))
    p = t + np.arange(3.0)[:, None, None]
    m = metrics(p, t, per_slot=True)
    assert [s.mae for s in m.per_slot] == [0.0, 1.0, 2.0]
    assert m.mae == 1.0
    assert len(m.to_json()["per_slot"]) == 3


@settings(max_examples=50)
@given(st.lists(st.floats(0, 100), min_size=4, max_size=4), st.lists(st.floats(0, 100), min_size=4, max_size=4))
def test_metrics_nonnegative(a, b):
    m = metrics(np.reshape(a, (2, 2)), np.reshape(b, (2, 2)))
    assert m.mae >= 0 and m.rmse >= m.mae - 1e-12
    assert m.wmape is None or m.wmape >= 0


def test_mean_and_stderr():
    assert mean_and_stderr([2.0, 4.0]) == (3.0, 1.0)
    assert mean_and_stderr([5.0]) == (5.0, 0.0)
    v = [0.1, 0.4, 0.2, 0.9]
    m, se = mean_and_stderr(v)
    assert se == pytest.approx(np.std(v, ddof=1) / 2, rel=1e-15)
    s = summarize_reports([metrics(np.ones(2), np.zeros(2)), metrics(np.full(2, 3.0), np.zeros(2))])
    assert s["mae"]["mean"] == 2.0 and s["mae"]["stderr"] == 1.0
    assert s["wmape"]["runs"] == [None, None]


def test_ha_examples():
    values = np.zeros((4, 2, 1, 1))
    values[0, 1] = 2.0
    values[1, 1] = 4.0
    values[2:, :] = 7.0
    ha = HistoricalAverage(values, [0, 0, 1, 1], [0, 1, 2, 3])
    assert ha.predict(0, 1)[0, 0] == 3.0
    assert ha.predict(1, 0)[0, 0] == 7.0
    with pytest.raises(NoHistory):
        HistoricalAverage(values, [0, 0, 1, 1], [0, 1]).predict(1, 0)


def test_ha_matches_brute_force():
    r = np.random.default_rng(0)
    D, T, N = 12, 5, 3
    values = r.integers(0, 20, (D, T, N, N)).astype(float)
    classes = r.integers(0, 2, D)
    days = list(range(9))
    ha = HistoricalAverage(values, classes, days)
    for c in set(classes[days].tolist()):
        for s in range(T):
            for i in range(N):
                for j in range(N):
                    xs = [values[d, s, i, j] for d in days if classes[d] == c]
                    assert ha.predict(c, s)[i, j] == sum(xs) / len(xs)


def test_ha_baseline_on_cube(small_cube):
    days = [0, 1, 4, 5, 6]  # weekdays of the small dataset
    pred = ha_baseline(small_cube, SlotIndex(7, 20), days)
    np.testing.assert_allclose(pred, small_cube.full[days, 20].mean(axis=0))
    with pytest.raises(NoHistory):
        ha_baseline(small_cube, SlotIndex(2, 20), days)
    with pytest.raises(NoHistory):
        ha_baseline(small_cube, SlotIndex(2, 20), [])


def test_split_arrays_match_slot_tensors(tiny_data):
    from odflow.ingestion import DelayedRatioTable

    a = tiny_data.splits["val"]
    cube, spec = tiny_data.cube, tiny_data.spec
    ratios = DelayedRatioTable(cube, tiny_data.train_days, tiny_data.mode)
    assert len(a) == len(tiny_data.val_days) * 56
    for n in (0, 17, len(a) - 1):
        t = a.targets[n]
        st_ = build_slot_tensors(cube, spec, t, 8)
        np.testing.assert_array_equal(a.finished[n], st_.finished)
        np.testing.assert_array_equal(a.inflow[n], st_.inflow)
        np.testing.assert_array_equal(a.finished_inflow[n], st_.finished_inflow)
        np.testing.assert_array_equal(a.odt[n], st_.odt)
        np.testing.assert_array_equal(a.label[n], cube.full_od(t))
        for k in range(8):
            np.testing.assert_array_equal(a.mdr[n, k], ratios.for_day(t.day, t.slot - 8 + k, 8 - k))


def test_normalizer_uses_training_days_only(tiny_data):
    full = tiny_data.cube.full[tiny_data.train_days]
    assert tiny_data.normalizer.mean == pytest.approx(full.mean(), rel=1e-12)
    assert tiny_data.normalizer.std == pytest.approx(full.std(), rel=1e-12)


def test_experiment_config_json_and_reseed():
    exp = desk_experiment(use_geo=False)
    back = ExperimentConfig.from_json(json.loads(json.dumps(exp.to_json())))
    assert back == exp
    r = exp.reseeded(9)
    assert r.predictor_schedule.seed == 9 == r.estimator_schedule.seed
    assert r.predictor_schedule.max_epochs == 30
    cfg = exp.predictor_config(5, type("N", (), {"apply": staticmethod(lambda x: -2.0)})())
    assert cfg.output_floor == -2.0 and not cfg.use_geo


def test_pipeline_smoke(tiny_data, tiny_estimator, tmp_path):
    exp = desk_experiment(
        predictor_gcn_units=8, predictor_lstm_units=8, predictor_schedule=TrainSchedule(max_epochs=2)
    )
    res = run_pipeline(tiny_data, exp, tiny_estimator, out_dir=tmp_path)
    assert (tmp_path / "predictor.ckpt").exists()
    assert res.prediction.shape == tiny_data.splits["test"].label.shape
    assert (res.prediction >= 0).all()
    assert res.estimator is not None and res.model.wmape > 0
    out = res.to_json()
    assert set(out) >= {"model", "ha", "estimator", "raw_window"}
    raw = run_pipeline(tiny_data, exp.with_(use_completion=False))
    assert raw.estimator is None and raw.estimator_params is None


def test_weekly_source_needs_no_estimator(tiny_data):
    exp = desk_experiment(
        mdp_source="weekly", predictor_gcn_units=4, predictor_lstm_units=4, predictor_schedule=TrainSchedule(max_epochs=1)
    )
    res = run_pipeline(tiny_data, exp)
    assert res.estimator_params is None and res.estimator is not None


def test_pair_csv(tmp_path):
    truth = np.ones((2, 2, 2))
    pred = truth + np.array([[0.0, 1.0], [2.0, 0.5]])
    write_pair_csv(tmp_path / "p.csv", pred, truth, ["A", "B"])
    rows = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert len(rows) == 4
    assert rows[1] == {"origin_id": "A", "dest_id": "B", "mae": "1.000000", "truth_total": "2", "pred_total": "4.000000"}
