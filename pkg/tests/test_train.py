import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuralme.cardio import build_model
from neuralme.dataset import Dataset, read_waveform_csv, write_waveform_csv
from neuralme.errors import DimensionMismatch, Diverged, InsufficientCycles, NonUniformInput, ParseError, ValidationError
from neuralme.train import (AdamState, Metrics, TrainConfig, adam_step, benchmark, build_dataset, evaluate,
                            horizon_at, loss_mse_horizon, prepare_hybrid, sample_subset, simulate_on, train)


# -- dataset and CSV -----------------------------------------------------------
def test_waveform_csv_roundtrip_is_lossless(tmp_path, rng):
    t = np.arange(7) / 40.0
    p = rng.uniform(5e3, 2e4, (7, 3)) * (1 + 1e-13 * rng.standard_normal((7, 3)))
    path = tmp_path / "w.csv"
    write_waveform_csv(path, t, p, (4, 7, 9))
    t2, p2, ids = read_waveform_csv(path)
    assert tuple(ids) == (4, 7, 9)
    np.testing.assert_array_equal(t2, t)
    np.testing.assert_array_equal(p2, p)
    assert path.read_text().startswith("t,p_4,p_7,p_9\n")


def test_waveform_csv_errors(tmp_path):
    bad = tmp_path / "b.csv"
    bad.write_text("time,p_1\n0,1\n")
    with pytest.raises(ParseError):
        read_waveform_csv(bad)
    bad.write_text("t,p_1\n0,abc\n")
    with pytest.raises(ParseError):
        read_waveform_csv(bad)
    with pytest.raises(DimensionMismatch):
        Dataset(np.zeros(3), np.zeros((2, 1)), (1,))


def test_build_dataset_keeps_last_two_cycles(desk, heart_a, data_a):
    period = heart_a.period
    assert data_a.n_samples == 66
    assert data_a.times[0] == pytest.approx(period, abs=1 / 40)
    assert data_a.times[0] >= period - 1e-12 and data_a.times[-1] < 3 * period
    np.testing.assert_allclose(np.diff(data_a.times), 1 / 40)
    assert data_a.heart_rate == 73.0


def test_build_dataset_rejections(data_a):
    short = Dataset(data_a.times[:20], data_a.pressures[:20], data_a.segment_ids)
    with pytest.raises(InsufficientCycles):
        build_dataset(short, 73.0)
    t = data_a.times.copy()
    t[5] += 1e-3
    with pytest.raises(NonUniformInput):
        build_dataset(Dataset(t, data_a.pressures, data_a.segment_ids), 73.0)
    with pytest.raises(ValidationError):
        build_dataset(data_a, 73.0, rate=100.0)


# -- loss, subsets, schedule ------------------------------------------------------
def test_loss_is_mse_over_horizon_and_subset(data_a):
    pred = data_a.pressures + 2.0
    assert loss_mse_horizon(pred, data_a, 8, [0, 2]) == pytest.approx(4.0)
    pred[10:, :] += 100.0
    assert loss_mse_horizon(pred, data_a, 10, [1]) == pytest.approx(4.0)
    with pytest.raises(DimensionMismatch):
        loss_mse_horizon(pred, data_a, 0, [1])
    with pytest.raises(DimensionMismatch):
        loss_mse_horizon(pred, data_a, 5, [])


@given(st.integers(1, 12), st.data())
def test_subset_is_sorted_distinct(n, data):
    k = data.draw(st.integers(1, n))
    s = sample_subset(np.random.default_rng(data.draw(st.integers(0, 99))), n, k)
    assert len(set(s.tolist())) == k and list(s) == sorted(s) and 0 <= s.min() and s.max() < n


def test_subset_is_reproducible():
    a = [sample_subset(np.random.default_rng(7), 10, 3).tolist() for _ in range(2)]
    assert a[0] == a[1]
    with pytest.raises(ValidationError):
        sample_subset(np.random.default_rng(0), 3, 4)


def test_horizon_schedule():
    cfg = TrainConfig()
    assert [horizon_at(e, cfg, 66) for e in (0, 24, 25, 50, 175)] == [8, 8, 16, 24, 64]
    assert horizon_at(200, cfg, 66) == 66
    assert horizon_at(449, cfg, 66) == 66 and horizon_at(450, cfg, 66) == 66
    cfg = TrainConfig(epochs=1000)
    assert horizon_at(899, cfg, 500) == 8 + 8 * 35 and horizon_at(900, cfg, 500) == 500


# -- Adam -------------------------------------------------------------------------
def test_adam_first_step_has_size_lr():
    p, s = adam_step(np.zeros(3), np.array([1.0, -2.0, 0.5]), AdamState.zeros(3), lr=0.1)
    np.testing.assert_allclose(p, [-0.1, 0.1, -0.1], rtol=1e-6)
    assert list(s.t) == [1, 1, 1]


def test_adam_mask_and_per_entry_counter():
    s = AdamState.zeros(2)
    mask = np.array([True, False])
    p, s = adam_step([0.0, 0.0], [1.0, 1.0], s, lr=0.1, mask=mask)
    assert p[1] == 0.0 and list(s.t) == [1, 0]
    p, s = adam_step(p, [1.0, 1.0], s, lr=0.1)
    # the late entry gets a bias-corrected full-size first step
    assert p[1] == pytest.approx(-0.1, rel=1e-6)
    with pytest.raises(DimensionMismatch):
        adam_step([0.0], [1.0, 2.0], s)


def test_adam_minimizes_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    p, s = np.zeros(3), AdamState.zeros(3)
    for _ in range(3000):
        p, s = adam_step(p, 2 * (p - target), s, lr=0.01)
    np.testing.assert_allclose(p, target, atol=1e-3)


# -- config ----------------------------------------------------------------------
def test_config_json_roundtrip(tmp_path):
    cfg = TrainConfig(epochs=12, learning_rate=5e-3, max_frozen_epochs=4)
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert TrainConfig.from_json(p) == cfg


@pytest.mark.parametrize("bad", [dict(epochs=-1), dict(learning_rate=0.0), dict(beta1=1.0),
                                 dict(subset_size=9), dict(unfreeze_threshold=1.5), dict(grad_clip=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValidationError):
        TrainConfig(**bad).validate(5, 66)


def test_config_unknown_keys_and_bad_json(tmp_path):
    with pytest.raises(ValidationError, match="unknown"):
        TrainConfig.from_dict({"epoch": 3})
    p = tmp_path / "c.json"
    p.write_text("{bad")
    with pytest.raises(ValidationError):
        TrainConfig.from_json(p)


# -- rollouts and training ----------------------------------------------------------
def test_evaluate_untrained_matches_inner(desk, heart_a, data_a):
    inner = build_model(desk, "simple_C", heart=heart_a)
    m = prepare_hybrid(inner, data_a, "C", heart_a)
    a, b = evaluate(m, data_a, heart_a), evaluate(inner, data_a, heart_a)
    assert a.total_mse == b.total_mse
    assert set(a.per_segment_mse) == set(desk.observed)
    assert a.wall_time_per_pulse > 0


def test_short_training_run_records_history(tmp_path, desk, heart_a, data_a):
    inner = build_model(desk, "simple_C", heart=heart_a)
    m = prepare_hybrid(inner, data_a, "C", heart_a)
    seen = []
    cfg = TrainConfig(epochs=6, learning_rate=1e-2, max_frozen_epochs=2)
    params, met = train(m, data_a, cfg, heart_a, log=lambda *a: seen.append(a))
    assert len(met.loss_history) == 6 == len(seen)
    assert met.frozen_history[:3] == [True, True, True] and met.unfreeze_epoch == 2
    assert met.total_mse <= met.initial_mse
    assert params is m.params
    met.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,horizon,subset,frozen" and len(lines) == 7
    json.dumps(met.summary())


def test_training_is_deterministic(desk, heart_a, data_a):
    runs = []
    for _ in range(2):
        inner = build_model(desk, "simple_C", heart=heart_a)
        m = prepare_hybrid(inner, data_a, "C", heart_a, seed=4)
        train(m, data_a, TrainConfig(epochs=3, learning_rate=1e-2, rng_seed=4), heart_a)
        runs.append(m.params.flat.copy())
    np.testing.assert_array_equal(runs[0], runs[1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_last_finite(desk, heart_a, data_a):
    inner = build_model(desk, "simple_C", heart=heart_a)
    m = prepare_hybrid(inner, data_a, "C", heart_a)
    m.params.state_bias[...] = 1e200
    with pytest.raises(Diverged) as ei:
        train(m, data_a, TrainConfig(epochs=2), heart_a)
    assert ei.value.epoch == 0


def test_prepare_hybrid_lc_scales_flows(desk, heart_a, data_a):
    inner = build_model(desk, "simple_LC", heart=heart_a)
    m = prepare_hybrid(inner, data_a, "LC", heart_a)
    assert m.scalers.state.size == 10 and not m.scalers.degenerate["state"]
    pred, _ = simulate_on(m, data_a, heart_a)
    assert pred.shape == data_a.pressures.shape


def test_benchmark_report(desk, heart_a):
    models = {"c": build_model(desk, "simple_C", heart=heart_a)}
    rep = benchmark(models, heart_a, n_pulses=1, repetitions=3)
    r = rep["models"]["c"]
    assert len(r["samples"]) == 3 and r["median"] > 0 and r["n_states"] == 9
    with pytest.raises(ValidationError):
        benchmark(models, heart_a, repetitions=2)


def test_metrics_summary_defaults():
    s = Metrics().summary()
    assert s["epochs_run"] == 0 and s["unfreeze_epoch"] is None
