import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from clops.config import DEFAULT_LAGS, ModelConfig
from clops.etl import TimeSeriesRecord
from clops.features import (NORM_EPS, NormStats, assemble_inputs, datetime_features, instance_normalize,
                            lag_features, log_scale_feature, make_windows, sample_indices, sample_windows,
                            unnormalize, unnormalize_forecast)
from clops.heads import ForecastDistribution
from clops.synthetic import gen_synthetic


def test_normalize_constant_window():
    out, st_ = instance_normalize(np.full((5, 1), 3.0))
    assert not out.any()
    assert st_.loc[0] == 3.0 and st_.scale[0] == pytest.approx(math.sqrt(NORM_EPS))


def test_normalize_two_points():
    out, st_ = instance_normalize(np.array([[0.0], [2.0]]))
    assert st_.loc[0] == 1.0 and st_.scale[0] == pytest.approx(1.0)
    np.testing.assert_allclose(out[:, 0], [-1.0, 1.0])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.integers(1, 3)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_normalize_round_trip(y):
    norm, s = instance_normalize(y)
    np.testing.assert_allclose(unnormalize(norm, s), y, atol=1e-6, rtol=1e-9)


def test_unnormalize_student_t():
    d = ForecastDistribution("student_t", {k: np.full((1, 1, 1), v) for k, v in
                                           (("mu", 0.0), ("sigma", 1.0), ("nu", 3.0))})
    out = unnormalize_forecast(d, NormStats(np.array([[5.0]]), np.array([[2.0]])))
    assert (out.params["mu"].item(), out.params["sigma"].item(), out.params["nu"].item()) == (5.0, 2.0, 3.0)
    same = unnormalize_forecast(d, NormStats(np.zeros((1, 1)), np.ones((1, 1))))
    assert all(np.array_equal(same.params[k], d.params[k]) for k in d.params)


def test_unnormalize_quantiles():
    d = ForecastDistribution("iqf", {"quantiles": np.array([-1.0, 0.0, 1.0]).reshape(1, 1, 1, 3)},
                             levels=(0.1, 0.5, 0.9))
    out = unnormalize_forecast(d, NormStats(np.array([[3.0]]), np.array([[2.0]])))
    np.testing.assert_array_equal(out.params["quantiles"].ravel(), [1.0, 3.0, 5.0])


def test_unnormalize_unsupported():
    with pytest.raises(TypeError):
        unnormalize_forecast(ForecastDistribution("mystery", {"mu": np.zeros((1, 1, 1))}),
                             NormStats(np.zeros((1, 1)), np.ones((1, 1))))


def test_log_scale_feature():
    assert log_scale_feature(NormStats(np.zeros(1), np.ones(1)))[0] == 0.0
    assert log_scale_feature(NormStats(np.zeros(1), np.array([math.e])))[0] == pytest.approx(1.0)
    _, s = instance_normalize(np.full((4, 1), 2.0))
    v = log_scale_feature(s)[0]
    assert math.isfinite(v) and v == pytest.approx(math.log(math.sqrt(NORM_EPS)))


def test_datetime_examples():
    ts = np.array(["2021-03-01T12:00:00", "2021-03-01T12:59:00"], dtype="datetime64[s]")
    f = datetime_features(ts)
    assert f[0, 0] == -0.5 and f[1, 0] == 0.5
    assert f[0, 1] == pytest.approx(12 / 23 - 0.5) and round(f[0, 1], 4) == 0.0217
    assert f[0, 2] == -0.5  # Monday
    assert f[0, 3] == -0.5  # first day of month


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 4_000_000_000))
def test_datetime_bounded(sec):
    ts = np.datetime64(sec, "s") + np.arange(300) * np.timedelta64(300, "s")
    f = datetime_features(ts)
    assert f.min() >= -0.5 and f.max() <= 0.5


def test_lag_zero_fill_and_constant():
    y = np.arange(10.0)[None]
    vals, valid = lag_features(y, np.array([0, 3, 9]), lags=(1, 4))
    assert vals.shape == (3, 1, 2)
    assert vals[0, 0].tolist() == [0.0, 0.0] and not valid[0].any()
    assert vals[1, 0].tolist() == [2.0, 0.0] and valid[1].tolist() == [True, False]
    assert vals[2, 0].tolist() == [8.0, 5.0]
    const, _ = lag_features(np.full((1, 50), 4.0), np.arange(30, 50), lags=(1, 2, 24))
    assert np.all(const == 4.0)


def _lengths_collection(lengths):
    return [TimeSeriesRecord(f"s{i}", "a", np.datetime64("2020-01-01T00:00:00"), np.ones((1, n)),
                             np.zeros((0, n)), np.zeros(0), np.zeros((1, n), bool))
            for i, n in enumerate(lengths)]


def test_sampling_length_proportional():
    coll = _lengths_collection([100, 300])
    picks = np.concatenate([sample_indices(coll, 1000, 10, 5, seed=0, counter=c)[0] for c in range(100)])
    counts = np.bincount(picks, minlength=2)
    assert counts.sum() == 100_000
    p = stats.chisquare(counts, [25_000, 75_000]).pvalue
    assert p > 0.01


def test_sampling_single_series_and_determinism():
    coll = gen_synthetic(1, 400, seed=0)
    idx, _ = sample_indices(coll, 64, 20, 5, seed=3, counter=1)
    assert not idx.any()
    a = sample_windows(gen_synthetic(4, 400), 8, 24, 6, seed=1, counter=7, lags=(1, 2))
    b = sample_windows(gen_synthetic(4, 400), 8, 24, 6, seed=1, counter=7, lags=(1, 2))
    assert a.context_targets.tobytes() == b.context_targets.tobytes()
    assert a.starts.tolist() == b.starts.tolist()


def test_short_series_left_padded():
    coll = gen_synthetic(1, 30, seed=0)
    batch = sample_windows(coll, 2, 24, 12, seed=0, counter=0, lags=(1,))
    assert batch.pad_mask[:, :6].all() and not batch.pad_mask[:, 6:].any()
    assert not batch.context_targets[:, :6].any()


@pytest.mark.parametrize("use_datetime, d_y, expected", [(True, 1, 24), (False, 1, 19), (True, 2, 43)])
def test_d_in(use_datetime, d_y, expected):
    cfg = ModelConfig.preset("tiny", use_datetime=use_datetime, d_y=d_y)
    assert len(DEFAULT_LAGS) == 17
    assert cfg.d_in == expected
    series = gen_synthetic(3, 2000, seed=0, d_y=d_y)
    batch = sample_windows(series, 4, cfg.L, cfg.H, 0, 0, cfg.lags)
    inputs = assemble_inputs(batch, cfg)
    assert inputs.context.shape == (4, cfg.L, expected)
    assert inputs.prediction.shape == (4, cfg.H, expected)
    assert np.isfinite(inputs.context).all() and np.isfinite(inputs.prediction).all()


def test_prediction_positions_hide_future():
    cfg = ModelConfig.preset("tiny")
    series = gen_synthetic(2, 2000, seed=0)
    batch = make_windows(series, np.array([0, 1]), np.array([500, 900]), cfg.L, cfg.H, cfg.lags)
    pred = assemble_inputs(batch, cfg).prediction
    assert not pred[..., 0].any()
    lag_block = pred[..., 1:1 + len(cfg.lags)]
    short = np.asarray(cfg.lags) < cfg.H
    assert not lag_block[..., short].any() and lag_block[..., ~short].any()
