"""Third-order statistics of short daily counter series.

Each series is modelled as a piecewise-linear trend (L1-penalized rate changes
at candidate changepoints) plus up to three sinusoidal harmonics picked from the
detrended periodogram, plus an optional weekend indicator regressor. The
fitted model's parameters, not the raw series, become the features.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

log = logging.getLogger(__name__)

MIN_DAYS = 15
MAX_DAYS = 45

STAT_NAMES = (
    "harmonic_power_1",
    "harmonic_power_2",
    "harmonic_power_3",
    "laplace_scale",
    "change_rate_mean",
    "change_rate_std",
    "growth_rate",
    "dominant_frequency",
    "trend_residual_std",
    "regressor_magnitude",
)

# Time / Money / Desperation counters, in output order.
DEFAULT_COUNTERS = (
    "games_played",
    "weekend_games",
    "weekday_games",
    "late_night_games",
    "loss",
    "add_cash_count",
    "add_cash_failures",
    "payment_modes",
    "win_ratio",
    "invalid_declarations",
    "bad_quality_hands",
)


@dataclass
class FeatureSeries:
    days: np.ndarray
    values: np.ndarray
    counter: str = ""

    def __post_init__(self):
        self.days = np.asarray(self.days, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.days.shape != self.values.shape or self.days.ndim != 1:
            raise ValueError("days and values must be 1-D arrays of equal length")
        if len(self.days) and np.any(np.diff(self.days) <= 0):
            raise ValueError(f"{self.counter or 'series'}: day indices must be strictly increasing")
        if np.any(~np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError(f"{self.counter or 'series'}: values must be finite and non-negative")
        span = self.span
        if span < MIN_DAYS:
            raise ValueError(f"{self.counter or 'series'}: {span} days observed, need at least {MIN_DAYS}")
        if span > MAX_DAYS:
            raise ValueError(f"{self.counter or 'series'}: {span} days observed, at most {MAX_DAYS} supported")

    @property
    def span(self) -> int:
        return int(self.days[-1] - self.days[0] + 1) if len(self.days) else 0

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Daily grid from first to last day; missing days linearly interpolated."""
        t = np.arange(self.days[0], self.days[-1] + 1)
        if len(t) == len(self.days):
            return t, self.values.copy()
        return t, np.interp(t, self.days, self.values)

    @classmethod
    def from_values(cls, values, counter: str = "", start: int = 0) -> "FeatureSeries":
        values = np.asarray(values, dtype=np.float64)
        return cls(np.arange(start, start + len(values)), values, counter)


def periodogram(x) -> tuple[np.ndarray, np.ndarray]:
    """One-sided power at the Fourier frequencies k/n, k = 0..n//2 (cycles per day).

    Powers are normalized so they sum to the population variance of ``x``; a
    sinusoid of amplitude A on a Fourier bin contributes A**2 / 2.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    spec = np.fft.rfft(x - x.mean())
    power = np.abs(spec) ** 2 / n**2
    power[1:] *= 2
    if n % 2 == 0:
        power[-1] /= 2
    return np.arange(len(power)) / n, power


# -- trend ------------------------------------------------------------------


@dataclass
class TrendFit:
    """Piecewise-linear trend ``offset + growth_rate*(t-t0) + sum delta_j * max(t - c_j, 0)``."""

    t0: float
    offset: float
    growth_rate: float
    changepoints: np.ndarray
    deltas: np.ndarray
    t_end: float = 0.0

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        out = self.offset + self.growth_rate * (t - self.t0)
        for c, d in zip(self.changepoints, self.deltas):
            out = out + d * np.maximum(t - c, 0.0)
        return out

    @property
    def slopes(self) -> np.ndarray:
        """Slope of each segment, first segment first."""
        return self.growth_rate + np.concatenate([[0.0], np.cumsum(self.deltas)])

    @property
    def laplace_scale(self) -> float:
        return float(np.mean(np.abs(self.deltas))) if len(self.deltas) else 0.0


def changepoint_candidates(t0: float, t_end: float, n_changepoints: int | None = None,
                           spacing: int = 5, changepoint_range: float = 0.8) -> np.ndarray:
    limit = t0 + changepoint_range * (t_end - t0)
    if n_changepoints is None:
        return np.arange(t0 + spacing, limit + 1e-9, spacing, dtype=np.float64)
    if n_changepoints == 0:
        return np.zeros(0)
    return np.linspace(t0, limit, n_changepoints + 2)[1:-1]


def _lasso_cd(X: np.ndarray, y: np.ndarray, lam: float, tol: float = 1e-13, max_iter: int = 20000) -> np.ndarray:
    """Coordinate descent for (1/2n)||y - X b||^2 + lam * ||b||_1."""
    n, p = X.shape
    b = np.zeros(p)
    col_sq = np.einsum("ij,ij->j", X, X) / n
    r = y.copy()
    for _ in range(max_iter):
        biggest = 0.0
        for j in range(p):
            if col_sq[j] <= 1e-15:
                continue
            old = b[j]
            rho = X[:, j] @ r / n + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            if new != old:
                r -= X[:, j] * (new - old)
                b[j] = new
                biggest = max(biggest, abs(new - old))
        if biggest < tol:
            break
    return b


def fit_piecewise_trend(t, y, n_changepoints: int | None = None, spacing: int = 5,
                        penalty: float = 0.1, changepoint_range: float = 0.8) -> TrendFit:
    """Piecewise-linear least-squares trend with sparse rate changes at evenly spaced candidates.

    ``penalty`` weights the L1 norm of the rate changes against half the sum
    of squared residuals; changepoints it leaves active are then refit without
    penalty. Values and time are rescaled (by the value range and the time span) before
    fitting so ``penalty`` is unit-free and adding a constant to ``y`` leaves
    every rate unchanged. Offset and base rate are unpenalized, so the residual
    is orthogonal to the constant and linear columns.
    """
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(t)
    t0, t_end = float(t[0]), float(t[-1])
    cps = changepoint_candidates(t0, t_end, n_changepoints, spacing, changepoint_range)
    if n < 3 or len(cps) >= n / 3:
        raise np.linalg.LinAlgError(
            f"underdetermined trend fit: {len(cps)} changepoints + 2 base terms for {n} points (need changepoints < n/3)"
        )
    span = max(t_end - t0, 1.0)
    scale = float(np.ptp(y)) or 1.0
    ts = (t - t0) / span
    ys = y / scale
    A = np.column_stack([np.ones(n), ts])
    C = np.maximum(ts[:, None] - (cps[None, :] - t0) / span, 0.0)
    rank = np.linalg.matrix_rank(np.column_stack([A, C]))
    if rank < 2 + len(cps):
        raise np.linalg.LinAlgError(f"trend design matrix rank {rank} < {2 + len(cps)} columns")
    Q, _ = np.linalg.qr(A)
    Cp = C - Q @ (Q.T @ C)
    yp = ys - Q @ (Q.T @ ys)
    d = np.zeros(len(cps))
    if len(cps):
        # L1 selects the active changepoints, an unpenalized refit removes the shrinkage bias
        active = _lasso_cd(Cp, yp, penalty / n) != 0
        if active.any():
            coef, *_ = np.linalg.lstsq(np.column_stack([A, C[:, active]]), ys, rcond=None)
            d[active] = coef[2:]
    base, *_ = np.linalg.lstsq(A, ys - C @ d, rcond=None)
    k = scale / span
    return TrendFit(t0, base[0] * scale, base[1] * k, cps, d * k, t_end)


# -- seasonality ------------------------------------------------------------


@dataclass
class SeasonalFit:
    """Up to three sinusoids (ordered by descending periodogram power) plus optional regressor terms."""

    frequencies: np.ndarray
    powers: np.ndarray
    cos_coef: np.ndarray
    sin_coef: np.ndarray
    regressor_coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    regressor_fn: object = None

    @property
    def amplitudes(self) -> np.ndarray:
        return np.hypot(self.cos_coef, self.sin_coef)

    def harmonics(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros_like(t)
        for f, a, b in zip(self.frequencies, self.cos_coef, self.sin_coef):
            w = 2 * np.pi * f * t
            out += a * np.cos(w) + b * np.sin(w)
        return out

    def __call__(self, t) -> np.ndarray:
        out = self.harmonics(t)
        if len(self.regressor_coef) and self.regressor_fn is not None:
            out = out + self.regressor_fn(np.asarray(t)) @ self.regressor_coef
        return out


def weekend_indicator(t) -> np.ndarray:
    """Day-of-week regressor: day_index % 7 in {5, 6} counts as weekend."""
    t = np.asarray(t)
    return (np.mod(t, 7) >= 5).astype(np.float64)[:, None]


def top_peaks(freqs: np.ndarray, power: np.ndarray, k: int = 3, rel_tol: float = 1e-12) -> np.ndarray:
    """Indices of up to ``k`` local maxima of ``power`` (DC excluded), by descending power."""
    floor = rel_tol * max(power.sum(), 1e-300)
    cand = []
    for i in range(1, len(power)):
        left = power[i - 1] if i > 1 else -np.inf
        right = power[i + 1] if i + 1 < len(power) else -np.inf
        if power[i] > floor and power[i] >= left and power[i] >= right:
            cand.append(i)
    cand.sort(key=lambda i: (-power[i], i))
    return np.asarray(cand[:k], dtype=np.int64)


def _sinusoid_design(t: np.ndarray, freqs) -> np.ndarray:
    cols = []
    for f in freqs:
        w = 2 * np.pi * f * t
        cols.extend([np.cos(w), np.sin(w)])
    return np.column_stack(cols) if cols else np.zeros((len(t), 0))


def _refine_frequency(t: np.ndarray, x: np.ndarray, f0: float, df: float) -> float:
    def neg_fit(f):
        X = _sinusoid_design(t, [f])
        coef, *_ = np.linalg.lstsq(X, x, rcond=None)
        fitted = X @ coef
        return -(fitted @ fitted)

    # below one cycle per window a sinusoid is collinear with the trend
    lo, hi = max(f0 - df, 1.0 / len(t)), min(f0 + df, 0.5)
    res = minimize_scalar(neg_fit, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    return float(res.x) if res.fun <= neg_fit(f0) else f0


def fit_seasonal(t, x, n_harmonics: int = 3, regressor_fn=weekend_indicator,
                 min_rel_power: float = 0.1) -> SeasonalFit:
    """Fit harmonics at the strongest periodogram peaks of detrended ``x``, then regressors on what remains.

    Peaks weaker than ``min_rel_power`` times the strongest one are left out of
    the fitted model (they are mostly noise on 15-45 point series).
    """
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    freqs, power = periodogram(x)
    idx = top_peaks(freqs, power, n_harmonics)
    if len(idx):
        idx = idx[power[idx] >= min_rel_power * power[idx[0]]]
    refined = []
    resid = x - x.mean()
    for i in idx:
        f = _refine_frequency(t, resid, freqs[i], 1.0 / len(x))
        refined.append(f)
        X = _sinusoid_design(t, [f])
        coef, *_ = np.linalg.lstsq(X, resid, rcond=None)
        resid = resid - X @ coef
    X = _sinusoid_design(t, refined)
    if X.shape[1]:
        coef, *_ = np.linalg.lstsq(np.column_stack([X, np.ones(len(t))]), x, rcond=None)
        coef = coef[:-1]
    else:
        coef = np.zeros(0)
    fit = SeasonalFit(np.asarray(refined), power[idx], coef[0::2], coef[1::2])
    if regressor_fn is not None:
        _fit_regressors(fit, t, x - fit.harmonics(t), regressor_fn)
    return fit


def _fit_regressors(fit: SeasonalFit, t: np.ndarray, rest: np.ndarray, regressor_fn) -> None:
    Z = regressor_fn(t)
    Zc = Z - Z.mean(axis=0)
    if np.linalg.matrix_rank(Zc) == Z.shape[1]:
        rc, *_ = np.linalg.lstsq(Zc, rest - rest.mean(), rcond=None)
    else:
        rc = np.zeros(Z.shape[1])
    fit.regressor_coef = rc
    fit.regressor_fn = regressor_fn


@dataclass
class SeriesModel:
    trend: TrendFit
    seasonal: SeasonalFit
    t: np.ndarray
    y: np.ndarray

    def __call__(self, t) -> np.ndarray:
        return self.trend(t) + self.seasonal(t)


def fit_series(series: FeatureSeries, n_changepoints: int | None = None, spacing: int = 5,
               penalty: float = 0.1, n_harmonics: int = 3, regressor_fn=weekend_indicator,
               n_iter: int = 4) -> SeriesModel:
    """Backfit trend and seasonality on the interpolated daily series, then refit jointly.

    Backfitting picks the active changepoints and harmonic frequencies; the
    final joint least-squares pass re-estimates all linear coefficients
    together so neither component absorbs the other.
    """
    t, y = series.dense()
    tf = t.astype(np.float64)
    seasonal = SeasonalFit(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))
    for _ in range(n_iter):
        trend = fit_piecewise_trend(tf, y - seasonal(tf), n_changepoints, spacing, penalty)
        seasonal = fit_seasonal(tf, y - trend(tf), n_harmonics, regressor_fn)
    active = trend.deltas != 0
    hinge = np.maximum(tf[:, None] - trend.changepoints[active][None, :], 0.0)
    X = np.column_stack([np.ones(len(tf)), tf - trend.t0, hinge, _sinusoid_design(tf, seasonal.frequencies)])
    if np.linalg.matrix_rank(X) == X.shape[1]:
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        k = 2 + int(active.sum())
        deltas = np.zeros_like(trend.deltas)
        deltas[active] = coef[2:k]
        trend = TrendFit(trend.t0, coef[0], coef[1], trend.changepoints, deltas, trend.t_end)
        seasonal.cos_coef, seasonal.sin_coef = coef[k::2], coef[k + 1::2]
        if regressor_fn is not None:
            _fit_regressors(seasonal, tf, y - trend(tf) - seasonal.harmonics(tf), regressor_fn)
    return SeriesModel(trend, seasonal, tf, y)


def forecast(trend: TrendFit, seasonal: SeasonalFit, horizon: int, t_last: float | None = None) -> np.ndarray:
    """Trend + harmonics (+ regressors) on the ``horizon`` days after the fitted window."""
    if horizon <= 0:
        return np.zeros(0)
    start = trend.t_end if t_last is None else t_last
    t = start + np.arange(1, horizon + 1, dtype=np.float64)
    return trend(t) + seasonal(t)


def mape(actual, predicted) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    return float(np.mean(np.abs((actual - predicted) / actual)))


def extract_third_order_stats(series: FeatureSeries, **fit_kw) -> np.ndarray:
    """The 10 statistics in ``STAT_NAMES`` order."""
    if series.span < MIN_DAYS:
        raise ValueError(f"series spans {series.span} days, need at least {MIN_DAYS}")
    model = fit_series(series, **fit_kw)
    t, y = model.t, model.y
    detrended = y - model.trend(t)
    freqs, power = periodogram(detrended)
    idx = top_peaks(freqs, power)
    powers = np.zeros(3)
    powers[:len(idx)] = power[idx]
    dominant = float(freqs[idx[0]]) if len(idx) else 0.0
    rate = np.diff(y) / np.diff(t)
    stats = np.array([
        *powers,
        model.trend.laplace_scale,
        rate.mean(),
        rate.std(),
        model.trend.growth_rate,
        dominant,
        detrended.std(),
        float(np.linalg.norm(model.seasonal.regressor_coef)),
    ])
    if not np.all(np.isfinite(stats)):
        raise FloatingPointError(f"{series.counter or 'series'}: non-finite statistics {stats}")
    return stats


def feature_names(counters=DEFAULT_COUNTERS) -> list[str]:
    return [f"{c}.{s}" for c in counters for s in STAT_NAMES]


def featurize_sample(series_by_counter: dict[str, FeatureSeries], counters=DEFAULT_COUNTERS, **fit_kw) -> np.ndarray:
    """Concatenate per-counter statistics in the order of ``counters``."""
    missing = [c for c in counters if c not in series_by_counter]
    if missing:
        raise KeyError(f"missing counter(s): {', '.join(missing)}")
    extra = sorted(set(series_by_counter) - set(counters))
    if extra:
        raise KeyError(f"unexpected counter(s): {', '.join(extra)}")
    return np.concatenate([extract_third_order_stats(series_by_counter[c], **fit_kw) for c in counters])


def read_series_csv(path) -> dict[str, dict[str, FeatureSeries]]:
    """Rows of (sample_id, counter_name, day_index, value) -> {sample: {counter: series}}."""
    rows = defaultdict(list)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        need = {"sample_id", "counter_name", "day_index", "value"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {sorted(need)}")
        for r in reader:
            rows[(r["sample_id"], r["counter_name"])].append((int(r["day_index"]), float(r["value"])))
    out: dict[str, dict[str, FeatureSeries]] = defaultdict(dict)
    for (sid, counter), pts in rows.items():
        pts.sort()
        days, vals = zip(*pts)
        out[sid][counter] = FeatureSeries(np.array(days), np.array(vals), counter)
    return dict(out)


def _featurize_item(args):
    sid, series, counters = args
    return sid, featurize_sample(series, counters)


def featurize_csv(in_path, out_path, counters=None, jobs: int = 1) -> int:
    """Featurize every sample in ``in_path``; returns the number of samples written.

    Without ``counters`` the canonical order is the sorted set of counter names
    found in the file.
    """
    samples = read_series_csv(in_path)
    if counters is None:
        counters = tuple(sorted({c for s in samples.values() for c in s}))
    ids = sorted(samples)
    items = [(sid, samples[sid], counters) for sid in ids]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_featurize_item, items))
    else:
        results = [_featurize_item(it) for it in items]
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", *feature_names(counters)])
        for sid, vec in results:
            w.writerow([sid, *(repr(float(v)) for v in vec)])
    return len(results)
