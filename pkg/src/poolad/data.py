"""Time-series data model: ingestion, normalization, segmentation,
and synthetic-anomaly injection.

All operations are pure: they return new values and never mutate their
inputs, so shared read-only series are safe under concurrency.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParseError

# Columns with sample std below this are treated as constant: shifted to
# zero mean and left unscaled.
CONST_STD_GUARD = 1e-8

ANOMALY_KINDS = ("spike", "contextual", "flip", "speedup", "scale")

TIMESTAMP_HEADERS = ("t", "time", "timestamp", "ts")


@dataclass
class TimeSeries:
    """An m x n matrix of values, with optional timestamps and binary labels."""

    values: np.ndarray
    timestamps: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values.reshape(-1, 1)
        m, n = self.values.shape
        if m < 1 or n < 1:
            raise DataError("time series must have at least one row and one column")
        if not np.all(np.isfinite(self.values)):
            raise DataError("time series contains non-finite values")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
            if len(self.timestamps) != m:
                raise DataError("timestamp length does not match row count")
            if m > 1 and not np.all(np.diff(self.timestamps) > 0):
                raise DataError("timestamps must be strictly increasing")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != m:
                raise DataError("label length does not match row count")
            if not np.all(np.isin(self.labels, (0, 1))):
                raise DataError("labels must be binary")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "TimeSeries":
        return TimeSeries(
            self.values.copy(),
            None if self.timestamps is None else self.timestamps.copy(),
            None if self.labels is None else self.labels.copy(),
        )


@dataclass
class SegmentedView:
    """Per-dimension length-L windows over a series.

    ``segments`` stacks all windows of all dimensions into one
    (count, L) matrix; ``origins`` maps each row back to
    (dimension, start time).
    """

    segment_length: int
    stride: int
    segments: np.ndarray  # (total_segments, L)
    origins: np.ndarray  # (total_segments, 2): (dim, start)
    n_dims: int
    source_len: int

    @property
    def per_dim_count(self) -> int:
        return self.segments.shape[0] // self.n_dims

    @property
    def covered_length(self) -> int:
        """Number of leading time points covered by at least one window."""
        return int(self.origins[:, 1].max()) + self.segment_length


@dataclass
class AnomalySpec:
    """One synthetic anomaly: kind, placement, magnitude, affected dims."""

    kind: str
    start: int
    length: int
    magnitude: float
    dims: tuple[int, ...] = field(default_factory=tuple)

    def validate(self, m: int, n: int) -> None:
        if self.kind not in ANOMALY_KINDS:
            raise DataError(f"unknown anomaly kind {self.kind!r}")
        if self.length < 1:
            raise DataError("anomaly length must be positive")
        if self.start < 0 or self.start + self.length > m:
            raise DataError("anomaly window exceeds series bounds")
        if self.magnitude <= 0:
            raise DataError("anomaly magnitude must be positive")
        if not self.dims:
            raise DataError("anomaly must affect at least one dimension")
        if any(d < 0 or d >= n for d in self.dims):
            raise DataError("anomaly dimension out of range")


def load_csv(path, has_labels: bool = False) -> TimeSeries:
    """Load a series from CSV.

    Layout: header row required; first column is a timestamp when its
    header is one of t/time/timestamp/ts; last column is a label column
    iff ``has_labels``; everything else is a data dimension.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        has_ts = header[0].strip().lower() in TIMESTAMP_HEADERS
        ncols = len(header)
        first_data = 1 if has_ts else 0
        last_data = ncols - 1 if has_labels else ncols
        if last_data <= first_data:
            raise ParseError(f"{path}: no data columns")

        rows, stamps, labels = [], [], []
        for rownum, row in enumerate(reader, start=1):
            if len(row) != ncols:
                raise ParseError(f"{path}: ragged row at row {rownum}")
            try:
                vals = [float(c) for c in row[first_data:last_data]]
            except ValueError:
                raise ParseError(f"{path}: non-numeric cell at row {rownum}") from None
            if not all(np.isfinite(vals)):
                raise ParseError(f"{path}: non-finite value at row {rownum}")
            rows.append(vals)
            if has_ts:
                try:
                    stamps.append(int(float(row[0])))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric timestamp at row {rownum}"
                    ) from None
            if has_labels:
                cell = row[-1].strip()
                if cell not in ("0", "1"):
                    raise ParseError(f"{path}: non-binary label at row {rownum}")
                labels.append(int(cell))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    if has_ts and len(stamps) > 1 and not all(
        b > a for a, b in zip(stamps, stamps[1:])
    ):
        bad = next(i for i in range(1, len(stamps)) if stamps[i] <= stamps[i - 1])
        raise ParseError(f"{path}: non-increasing timestamp at row {bad + 1}")
    return TimeSeries(
        np.asarray(rows, dtype=np.float64),
        np.asarray(stamps, dtype=np.int64) if has_ts else None,
        np.asarray(labels, dtype=np.int64) if has_labels else None,
    )


def save_csv(ts: TimeSeries, path) -> None:
    """Write a series in the same CSV layout load_csv reads."""
    m, n = ts.values.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["t"] + [f"d{i}" for i in range(n)]
        if ts.labels is not None:
            header.append("label")
        writer.writerow(header)
        stamps = ts.timestamps if ts.timestamps is not None else np.arange(m)
        for i in range(m):
            row = [int(stamps[i])] + [repr(float(v)) for v in ts.values[i]]
            if ts.labels is not None:
                row.append(int(ts.labels[i]))
            writer.writerow(row)


def normalize(ts: TimeSeries) -> tuple[TimeSeries, list[tuple[float, float]]]:
    """Standardize each column to sample mean 0 / sample std 1.

    Returns the normalized series and a per-column (mean, scale) record;
    constant columns (std < 1e-8) are shifted to 0 with scale 1.
    """
    if ts.m < 2:
        raise DataError("normalize requires at least 2 rows")
    means = ts.values.mean(axis=0)
    stds = ts.values.std(axis=0, ddof=1)
    scales = np.where(stds < CONST_STD_GUARD, 1.0, stds)
    out = (ts.values - means) / scales
    record = [(float(mu), float(s)) for mu, s in zip(means, scales)]
    return (
        TimeSeries(
            out,
            None if ts.timestamps is None else ts.timestamps.copy(),
            None if ts.labels is None else ts.labels.copy(),
        ),
        record,
    )


def denormalize(ts: TimeSeries, record: list[tuple[float, float]]) -> TimeSeries:
    """Invert normalize() using its (mean, scale) record."""
    means = np.array([r[0] for r in record])
    scales = np.array([r[1] for r in record])
    return TimeSeries(
        ts.values * scales + means,
        None if ts.timestamps is None else ts.timestamps.copy(),
        None if ts.labels is None else ts.labels.copy(),
    )


def segment(ts: TimeSeries, length: int, stride: int) -> SegmentedView:
    """Split each column into length-L windows at the given stride.

    The final partial window is dropped; count per dimension is
    floor((m-L)/stride) + 1.
    """
    m, n = ts.values.shape
    if length < 1 or stride < 1:
        raise DataError("segment length and stride must be positive")
    if length > m:
        raise DataError(f"segment length {length} exceeds series length {m}")
    starts = np.arange(0, m - length + 1, stride)
    segs = np.empty((n * len(starts), length), dtype=np.float64)
    origins = np.empty((n * len(starts), 2), dtype=np.int64)
    row = 0
    for d in range(n):
        col = ts.values[:, d]
        for s in starts:
            segs[row] = col[s : s + length]
            origins[row] = (d, s)
            row += 1
    return SegmentedView(length, stride, segs, origins, n, m)


def full_cover_view(ts: TimeSeries, length: int, stride: int) -> SegmentedView:
    """Like segment(), plus one tail-aligned window per dimension when the
    strided windows do not reach the end, so every point is covered."""
    view = segment(ts, length, stride)
    m = ts.m
    last = int(view.origins[:, 1].max())
    if last == m - length:
        return view
    extra_segs = np.stack([ts.values[m - length :, d] for d in range(ts.n)])
    extra_origins = np.array([(d, m - length) for d in range(ts.n)], dtype=np.int64)
    return SegmentedView(
        length,
        stride,
        np.vstack([view.segments, extra_segs]),
        np.vstack([view.origins, extra_origins]),
        ts.n,
        m,
    )


def reassemble(view: SegmentedView, outputs: np.ndarray) -> np.ndarray:
    """Scatter per-window outputs back onto the time axis, averaging
    overlapping coverage per point. Returns (covered_length, n_dims)."""
    covered = view.covered_length
    sums = np.zeros((covered, view.n_dims))
    counts = np.zeros((covered, view.n_dims))
    L = view.segment_length
    for row in range(outputs.shape[0]):
        d, s = view.origins[row]
        sums[s : s + L, d] += outputs[row]
        counts[s : s + L, d] += 1.0
    counts[counts == 0] = 1.0
    return sums / counts


def inject_anomaly(ts: TimeSeries, spec: AnomalySpec, seed: int = 0) -> TimeSeries:
    """Return a copy with one anomaly window injected and labels set to 1
    on [start, start+length); everything outside the window is untouched.

    spike: add magnitude * column std at each window point.
    contextual: replace window with column mean + magnitude * std.
    flip: reverse the window in time.
    speedup: resample the window at 2x rate; second half repeats the tail.
    scale: multiply window values by (1 + magnitude).
    """
    spec.validate(ts.m, ts.n)
    out = ts.copy()
    if out.labels is None:
        out.labels = np.zeros(ts.m, dtype=np.int64)
    a, b = spec.start, spec.start + spec.length
    for d in spec.dims:
        col = out.values[:, d]
        std = col.std()
        if std < CONST_STD_GUARD:
            std = 1.0
        window = col[a:b].copy()
        if spec.kind == "spike":
            col[a:b] = window + spec.magnitude * std
        elif spec.kind == "contextual":
            col[a:b] = col.mean() + spec.magnitude * std
        elif spec.kind == "flip":
            col[a:b] = window[::-1]
        elif spec.kind == "speedup":
            pos = 2.0 * np.arange(spec.length)
            pos = np.minimum(pos, spec.length - 1)
            idx = pos.astype(int)
            frac = pos - idx
            upper = np.minimum(idx + 1, spec.length - 1)
            col[a:b] = (1 - frac) * window[idx] + frac * window[upper]
        elif spec.kind == "scale":
            col[a:b] = window * (1.0 + spec.magnitude)
    out.labels[a:b] = 1
    return out


# ---------------------------------------------------------------------------
# Deterministic synthetic generators (training regimes, probe, CLI synth)
# ---------------------------------------------------------------------------


def gen_sine(m: int, n: int = 1, period: float = 32.0, noise: float = 0.05,
             seed: int = 0) -> TimeSeries:
    rng = np.random.default_rng(seed)
    t = np.arange(m)
    cols = [
        np.sin(2 * np.pi * t / (period * (1 + 0.25 * d)) + d)
        + noise * rng.standard_normal(m)
        for d in range(n)
    ]
    return TimeSeries(np.column_stack(cols))


def gen_ar1(m: int, n: int = 1, phi: float = 0.9, seed: int = 0) -> TimeSeries:
    rng = np.random.default_rng(seed)
    cols = []
    for _ in range(n):
        x = np.empty(m)
        x[0] = rng.standard_normal()
        eps = rng.standard_normal(m)
        for i in range(1, m):
            x[i] = phi * x[i - 1] + eps[i]
        cols.append(x)
    return TimeSeries(np.column_stack(cols))


def gen_trend_season(m: int, n: int = 1, period: float = 24.0,
                     slope: float = 0.002, seed: int = 0) -> TimeSeries:
    rng = np.random.default_rng(seed)
    t = np.arange(m)
    cols = [
        slope * t + 0.8 * np.sin(2 * np.pi * t / period + d)
        + 0.1 * rng.standard_normal(m)
        for d in range(n)
    ]
    return TimeSeries(np.column_stack(cols))


def gen_level_shift(m: int, n: int = 1, seed: int = 0) -> TimeSeries:
    rng = np.random.default_rng(seed)
    cols = []
    for d in range(n):
        x = 0.2 * rng.standard_normal(m)
        shift_at = m // 2 + (d * 13) % max(1, m // 8)
        x[shift_at:] += 1.5
        cols.append(x)
    return TimeSeries(np.column_stack(cols))


def gen_mixed(m: int, n: int = 1, seed: int = 0) -> TimeSeries:
    rng = np.random.default_rng(seed)
    t = np.arange(m)
    cols = []
    for d in range(n):
        x = 0.6 * np.sin(2 * np.pi * t / 40.0 + d)
        phi, ar = 0.7, np.empty(m)
        eps = rng.standard_normal(m)
        ar[0] = eps[0]
        for i in range(1, m):
            ar[i] = phi * ar[i - 1] + 0.3 * eps[i]
        x = x + ar + 0.001 * t
        cols.append(x)
    return TimeSeries(np.column_stack(cols))


def gen_base_series(m: int, n: int, seed: int = 0) -> TimeSeries:
    """Multi-regime base series for the synth CLI: each dimension cycles
    through sine / AR(1) / trend+season / mixed."""
    gens = (gen_sine, gen_ar1, gen_trend_season, gen_mixed)
    cols = [
        gens[d % len(gens)](m, 1, seed=seed + d).values[:, 0] for d in range(n)
    ]
    return TimeSeries(np.column_stack(cols))
