"""Synthetic daily counter series for featurizer tests and the acceptance suite."""

import numpy as np

from scarcegan.features import FeatureSeries, fit_series, forecast, mape

HORIZON = 7


def trend_weekly(n_days: int, slope: float = 0.8, level: float = 50.0, amp: float = 6.0, phase: float = 0.3):
    t = np.arange(n_days + HORIZON, dtype=np.float64)
    return level + slope * t + amp * np.sin(2 * np.pi * t / 7 + phase)


def forecast_mape(n_days: int, noise: float = 0.0, seed: int = 0) -> float:
    """Fit the first ``n_days`` points, forecast the next 7, MAPE against the (noisy) truth."""
    y = trend_weekly(n_days)
    if noise:
        y = y * (1 + noise * np.random.default_rng(seed).standard_normal(len(y)))
    model = fit_series(FeatureSeries.from_values(y[:n_days]))
    return mape(y[n_days:], forecast(model.trend, model.seasonal, HORIZON))
