import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import _series
from scarcegan import features as FT
from scarcegan.features import (
    DEFAULT_COUNTERS, STAT_NAMES, FeatureSeries, extract_third_order_stats, featurize_csv, featurize_sample,
    fit_piecewise_trend, forecast, periodogram,
)

STAT = {name: i for i, name in enumerate(STAT_NAMES)}


def stats_of(values, **kw):
    return extract_third_order_stats(FeatureSeries.from_values(values), **kw)


# -- series ------------------------------------------------------------------------


def test_series_validation():
    with pytest.raises(ValueError):
        FeatureSeries.from_values(np.ones(14))
    with pytest.raises(ValueError):
        FeatureSeries.from_values(np.ones(46))
    with pytest.raises(ValueError):
        FeatureSeries(np.array([0, 2, 1] + list(range(3, 20))), np.ones(20))
    with pytest.raises(ValueError):
        FeatureSeries.from_values(-np.ones(20))


def test_missing_days_interpolated():
    s = FeatureSeries(np.array([0, 1, 3] + list(range(4, 20))), np.array([0.0, 1.0, 3.0] + list(range(4, 20)), float))
    t, y = s.dense()
    assert len(t) == 20 and y[2] == pytest.approx(2.0)


# -- periodogram --------------------------------------------------------------------


def test_periodogram_sine_period_7():
    t = np.arange(42)
    freqs, power = periodogram(np.sin(2 * np.pi * t / 7))
    assert freqs[np.argmax(power)] == pytest.approx(1 / 7)
    assert np.sum(power > 1e-20) == 1


def test_periodogram_constant_is_zero():
    _, power = periodogram(np.full(30, 4.2))
    assert np.abs(power).max() <= 1e-24


def test_periodogram_amplitude_ratio():
    t = np.arange(42)
    freqs, power = periodogram(2 * np.sin(2 * np.pi * t / 7) + np.sin(2 * np.pi * t / 3))
    p7 = power[np.isclose(freqs, 1 / 7)][0]
    p3 = power[np.isclose(freqs, 1 / 3)][0]
    assert p7 / p3 == pytest.approx(4.0, rel=1e-9)


@given(st.lists(st.floats(0, 1e3), min_size=15, max_size=45))
def test_parseval(values):
    x = np.array(values)
    _, power = periodogram(x)
    assert abs(power.sum() - x.var()) <= 1e-9 * max(1.0, x.var())


# -- trend ------------------------------------------------------------------------


def test_straight_line_trend():
    t = np.arange(30.0)
    fit = fit_piecewise_trend(t, 3 + 2 * t)
    assert fit.growth_rate == pytest.approx(2.0, abs=1e-6)
    assert not fit.deltas.any()
    assert np.allclose(fit(t), 3 + 2 * t, atol=1e-9)


def test_two_segment_slopes_recovered():
    t = np.arange(40.0)
    y = np.where(t < 20, t, 20 + 3 * (t - 20))
    fit = fit_piecewise_trend(t, y)
    assert 20.0 in fit.changepoints
    assert fit.slopes[0] == pytest.approx(1.0, rel=0.05)
    assert fit.slopes[-1] == pytest.approx(3.0, rel=0.05)


def test_white_noise_strong_penalty_flat():
    y = np.random.default_rng(0).standard_normal(40) + 10
    fit = fit_piecewise_trend(np.arange(40.0), y, penalty=1e3)
    assert not fit.deltas.any()
    assert abs(fit.growth_rate) < 0.05


def test_trend_residual_orthogonal_to_basis():
    rng = np.random.default_rng(1)
    t = np.arange(35.0)
    y = 5 + 0.3 * t + rng.standard_normal(35)
    fit = fit_piecewise_trend(t, y)
    r = y - fit(t)
    active = fit.changepoints[fit.deltas != 0]
    basis = np.column_stack([np.ones_like(t), t] + [np.maximum(t - c, 0) for c in active])
    assert np.abs(basis.T @ r).max() <= 1e-8 * np.abs(y).sum()


def test_trend_continuous_at_changepoints():
    t = np.arange(40.0)
    fit = fit_piecewise_trend(t, np.where(t < 20, t, 20 + 3 * (t - 20)))
    for c in fit.changepoints:
        assert fit(np.array([c - 1e-9]))[0] == pytest.approx(fit(np.array([c + 1e-9]))[0], abs=1e-6)


def test_underdetermined_trend_rejected():
    with pytest.raises(np.linalg.LinAlgError, match="changepoints"):
        fit_piecewise_trend(np.arange(15.0), np.arange(15.0), n_changepoints=5)


@given(st.floats(-5, 5), st.floats(0, 100), st.integers(15, 45))
def test_noiseless_line_slope_recovered(slope, level, n):
    t = np.arange(n, dtype=float)
    fit = fit_piecewise_trend(t, level + 500 + slope * t)
    assert abs(fit.growth_rate - slope) <= 1e-6


# -- third-order statistics ------------------------------------------------------------


def test_stats_straight_line():
    s = stats_of(3 + 2 * np.arange(30.0))
    assert s[STAT["growth_rate"]] == pytest.approx(2.0, abs=1e-6)
    assert s[STAT["change_rate_std"]] == pytest.approx(0.0, abs=1e-9)
    assert np.all(s[:3] <= 1e-12)


def test_stats_line_plus_weekly():
    t = np.arange(42.0)
    s = stats_of(20 + 0.5 * t + 3 * np.sin(2 * np.pi * t / 7))
    assert s[STAT["dominant_frequency"]] == pytest.approx(1 / 7, abs=1e-9)
    assert s[STAT["harmonic_power_1"]] >= s[STAT["harmonic_power_2"]] >= s[STAT["harmonic_power_3"]] >= 0
    assert s[STAT["growth_rate"]] == pytest.approx(0.5, rel=0.05)


def test_stats_deterministic_and_bounds():
    y = np.random.default_rng(4).uniform(0, 10, 33)
    a, b = stats_of(y), stats_of(y.copy())
    assert a.tobytes() == b.tobytes()
    assert len(a) == 10 and np.all(np.isfinite(a))
    assert np.all(a[:3] >= 0) and a[STAT["change_rate_std"]] >= 0 and a[STAT["trend_residual_std"]] >= 0


def test_stats_short_series_rejected():
    with pytest.raises(ValueError):
        stats_of(np.ones(10))


@given(st.integers(0, 10**6), st.floats(0.5, 200))
def test_shift_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(15, 46))
    t = np.arange(n)
    y = 15 + rng.uniform(-0.3, 0.3) * t + 2 * np.sin(2 * np.pi * t / 7) + rng.uniform(0, 1, n)
    a, b = stats_of(y), stats_of(y + c)
    for name in ("growth_rate", "change_rate_mean", "change_rate_std", "laplace_scale",
                 "harmonic_power_1", "harmonic_power_2", "harmonic_power_3"):
        assert b[STAT[name]] == pytest.approx(a[STAT[name]], rel=1e-6, abs=1e-8), name


@given(st.integers(3, 14), st.floats(0, 2 * math.pi), st.integers(0, 10**6))
def test_harmonic_recovery_snr3(period, phase, seed):
    # amplitude 2 -> signal power 2; noise variance 2/3 -> SNR 3
    n = 45
    t = np.arange(n)
    noise = np.sqrt(2 / 3) * np.random.default_rng(seed).standard_normal(n)
    y = 30 + 2 * np.sin(2 * np.pi * t / period + phase) + noise
    s = stats_of(np.maximum(y, 0))
    assert abs(s[STAT["dominant_frequency"]] - 1 / period) <= 1 / n


# -- forecasting ---------------------------------------------------------------------


def test_forecast_zero_horizon():
    model = FT.fit_series(FeatureSeries.from_values(_series.trend_weekly(20)[:20]))
    assert forecast(model.trend, model.seasonal, 0).size == 0


@pytest.mark.parametrize("n_days", [15, 20, 28, 35, 45])
def test_noiseless_forecast_mape(n_days):
    assert _series.forecast_mape(n_days) <= 0.01


@pytest.mark.parametrize("n_days", [15, 20, 28, 35, 45])
def test_noisy_forecast_mape(n_days):
    mean = np.mean([_series.forecast_mape(n_days, 0.05, seed) for seed in range(20)])
    assert mean <= 0.10


# -- samples and CSV -------------------------------------------------------------------------


def _sample(rng, counters=DEFAULT_COUNTERS, n=30):
    return {c: FeatureSeries.from_values(rng.uniform(0, 5, n), c) for c in counters}


def test_featurize_sample_width_and_order(rng):
    sample = _sample(rng)
    v = featurize_sample(sample)
    assert v.shape == (110,)
    shuffled = dict(reversed(list(sample.items())))
    assert featurize_sample(shuffled).tobytes() == v.tobytes()


def test_featurize_sample_missing_counter(rng):
    sample = _sample(rng)
    del sample["loss"]
    with pytest.raises(KeyError, match="loss"):
        featurize_sample(sample)


def test_constant_zero_counter_finite(rng):
    sample = _sample(rng)
    sample["payment_modes"] = FeatureSeries.from_values(np.zeros(30), "payment_modes")
    v = featurize_sample(sample)
    assert np.all(np.isfinite(v))
    i = DEFAULT_COUNTERS.index("payment_modes")
    assert not v[10 * i:10 * i + 10].any()


def test_featurize_csv(tmp_path, rng):
    src = tmp_path / "series.csv"
    with open(src, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "counter_name", "day_index", "value"])
        for sid in ("a", "b"):
            for c in ("games_played", "loss"):
                for d, v in enumerate(rng.uniform(0, 9, 20)):
                    w.writerow([sid, c, d, v])
    out = tmp_path / "features.csv"
    assert featurize_csv(src, out) == 2
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["sample_id"] + FT.feature_names(("games_played", "loss"))
    assert [r[0] for r in rows[1:]] == ["a", "b"]
    assert all(len(r) == 21 for r in rows[1:])
    out2 = tmp_path / "features2.csv"
    featurize_csv(src, out2, jobs=2)
    assert out.read_text() == out2.read_text()
