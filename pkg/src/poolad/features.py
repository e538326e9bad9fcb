"""Fixed-length dataset feature vector.

14 per-dimension features aggregated across dimensions by (mean, std),
plus 6 cross-dimension features: 14 * 2 + 6 = 34. Spans distribution
shape, autocorrelation/seasonality, stationarity drift, and outlier
counts; degenerate inputs are guarded to 0 so every entry stays finite.
"""

from __future__ import annotations

import numpy as np

from .data import CONST_STD_GUARD, TimeSeries
from .errors import DataError

FEATURE_DIM = 34
_PER_DIM = 14
MIN_LENGTH = 8
_MAX_ACF_LAG = 128


def _acf(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Biased sample autocorrelation for lags 0..max_lag."""
    x = x - x.mean()
    denom = float(x @ x)
    if denom < CONST_STD_GUARD:
        return np.zeros(max_lag + 1)
    return np.array([float(x[: len(x) - k] @ x[k:]) / denom
                     for k in range(max_lag + 1)])


def _dim_features(x: np.ndarray) -> np.ndarray:
    m = len(x)
    mean = x.mean()
    var = x.var()
    std = np.sqrt(var)
    if std < CONST_STD_GUARD:
        skew = kurt = 0.0
        z = np.zeros(m)
    else:
        z = (x - mean) / std
        skew = float((z**3).mean())
        kurt = float((z**4).mean() - 3.0)

    max_lag = min(m // 2, _MAX_ACF_LAG)
    acf = _acf(x, max_lag)
    acf1 = acf[1] if max_lag >= 1 else 0.0
    acf2 = acf[2] if max_lag >= 2 else 0.0
    acf3 = acf[3] if max_lag >= 3 else 0.0

    zero_cross = float(max_lag)
    for k in range(1, max_lag + 1):
        if acf[k] <= 0:
            zero_cross = float(k)
            break

    if max_lag >= 4:
        period = int(np.argmax(acf[4:])) + 4
        seasonal = float(acf[period])
    else:
        period, seasonal = 0, 0.0

    half = m // 2
    a, b = x[:half], x[half:]
    drift = abs(b.mean() - a.mean()) / std if std >= CONST_STD_GUARD else 0.0
    std_a, std_b = a.std(), b.std()
    std_ratio = std_b / std_a if std_a >= CONST_STD_GUARD else 0.0

    outlier_frac = float((np.abs(z) > 3).mean())
    max_z = float(np.abs(z).max()) if m else 0.0

    return np.array([
        mean, var, skew, kurt, acf1, acf2, acf3, zero_cross,
        float(period), seasonal, drift, std_ratio, outlier_frac, max_z,
    ])


def extract_features(ts: TimeSeries) -> np.ndarray:
    """Deterministic, column-permutation-invariant feature vector."""
    if ts.m < MIN_LENGTH:
        raise DataError(f"feature extraction needs >= {MIN_LENGTH} points, got {ts.m}")
    m, n = ts.values.shape
    per_dim = np.stack([_dim_features(ts.values[:, d]) for d in range(n)])
    agg = np.concatenate([per_dim.mean(axis=0), per_dim.std(axis=0)])

    stds = ts.values.std(axis=0)
    if n >= 2:
        live = stds >= CONST_STD_GUARD
        if live.sum() >= 2:
            corr = np.corrcoef(ts.values[:, live].T)
            off = corr[np.triu_indices(int(live.sum()), k=1)]
            off = off[np.isfinite(off)]
            mean_corr = float(off.mean()) if len(off) else 0.0
            max_corr = float(off.max()) if len(off) else 0.0
        else:
            mean_corr = max_corr = 0.0
    else:
        mean_corr = max_corr = 0.0

    means = ts.values.mean(axis=0)
    scales = np.where(stds < CONST_STD_GUARD, 1.0, stds)
    zs = (ts.values - means) / scales
    global_outliers = float((np.abs(zs) > 3).mean())

    cross = np.array([
        np.log(float(n)), np.log(float(m)), mean_corr, max_corr,
        float(stds.mean()), global_outliers,
    ])
    out = np.concatenate([agg, cross])
    out[~np.isfinite(out)] = 0.0
    assert len(out) == FEATURE_DIM
    return out
