"""Threshold selection (mean-std, epsilon grid search, percentile),
pointwise anomaly identification, and the three precision-recall metrics
(point-wise, buffered-range, and buffer-averaged)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

EPSILON_Z_GRID = np.arange(2.0, 6.0 + 1e-9, 0.5)
DEFAULT_MULTIPLIER = 2.5
DEFAULT_VUS_WIDTH = 16


@dataclass
class DetectionResult:
    scores: np.ndarray
    threshold: float
    labels: np.ndarray  # labels[i] = 1 iff scores[i] > threshold (strict)
    ranges: list[tuple[int, int]]  # maximal runs of 1s, inclusive ends

    def to_dict(self) -> dict:
        return {
            "threshold": float(self.threshold),
            "n_anomalies": int(self.labels.sum()),
            "anomaly_ranges": [[int(a), int(b)] for a, b in self.ranges],
        }


def _runs(labels: np.ndarray) -> list[tuple[int, int]]:
    ranges = []
    start = None
    for i, v in enumerate(labels):
        if v and start is None:
            start = i
        elif not v and start is not None:
            ranges.append((start, i - 1))
            start = None
    if start is not None:
        ranges.append((start, len(labels) - 1))
    return ranges


def threshold_mean_std(scores: np.ndarray,
                       multiplier: float = DEFAULT_MULTIPLIER) -> float:
    """Mean plus a multiple of the population standard deviation."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < 2:
        raise DataError("threshold needs >= 2 scores")
    return float(scores.mean() + multiplier * scores.std())


def threshold_epsilon(scores: np.ndarray) -> float:
    """Grid search over mean + z*std candidates, scoring each by the drop
    in mean/std after pruning the points above, penalized by the count of
    pruned points plus the squared count of pruned runs. Falls back to
    max(scores) when no candidate prunes anything."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < 2:
        raise DataError("threshold needs >= 2 scores")
    mean, std = scores.mean(), scores.std()
    best_eps, best_quality = None, -np.inf
    for z in EPSILON_Z_GRID:
        eps = mean + z * std
        above = scores > eps
        n_above = int(above.sum())
        if n_above == 0 or n_above == len(scores):
            continue
        remaining = scores[~above]
        d_mean = mean - remaining.mean()
        d_std = std - remaining.std()
        term = (d_mean / mean if abs(mean) > 1e-12 else 0.0) \
            + (d_std / std if std > 1e-12 else 0.0)
        n_runs = len(_runs(above.astype(int)))
        quality = term / (n_above + n_runs**2)
        if quality > best_quality:
            best_quality, best_eps = quality, float(eps)
    if best_eps is None:
        return float(scores.max())
    return best_eps


def threshold_percentile(scores: np.ndarray, anomaly_ratio: float) -> float:
    """(1 - ratio)-quantile with linear interpolation, so approximately the
    requested fraction of points is labeled anomalous."""
    if not 0 < anomaly_ratio < 1:
        raise DataError("anomaly ratio must be in (0, 1)")
    scores = np.asarray(scores, dtype=np.float64)
    return float(np.quantile(scores, 1.0 - anomaly_ratio))


def identify(scores: np.ndarray, epsilon: float) -> DetectionResult:
    """Strict thresholding: a point is anomalous iff its score exceeds
    the threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = (scores > epsilon).astype(np.int64)
    return DetectionResult(scores, float(epsilon), labels, _runs(labels))


# ---------------------------------------------------------------------------
# Precision-recall metrics
# ---------------------------------------------------------------------------


def auc_pr(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average precision over the point-wise PR curve, ties grouped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) != len(labels):
        raise DataError("scores and labels differ in length")
    total_pos = int(labels.sum())
    if total_pos == 0 or total_pos == len(labels):
        raise DataError("degenerate labels: need both classes")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order].astype(np.float64)
    cum_tp = np.cumsum(l_sorted)
    counts = np.arange(1, len(scores) + 1)
    # group tied scores: a threshold boundary sits where the value changes
    boundary = np.append(s_sorted[1:] != s_sorted[:-1], True)
    tp = cum_tp[boundary]
    cnt = counts[boundary]
    precision = tp / cnt
    recall = tp / total_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def soften_labels(labels: np.ndarray, buffer: int) -> np.ndarray:
    """Extend each labeled range with a linear ramp of the given width on
    both sides; overlaps take the maximum."""
    labels = np.asarray(labels)
    soft = labels.astype(np.float64).copy()
    if buffer <= 0:
        return soft
    m = len(labels)
    for a, b in _runs(labels):
        for j in range(1, buffer + 1):
            val = 1.0 - j / (buffer + 1)
            if a - j >= 0:
                soft[a - j] = max(soft[a - j], val)
            if b + j < m:
                soft[b + j] = max(soft[b + j], val)
    return soft


def _soft_average_precision(scores: np.ndarray, soft: np.ndarray) -> float:
    """Average precision generalized to soft labels: true positives at a
    threshold are the summed soft labels of the predicted-positive set."""
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    w_sorted = soft[order]
    total = w_sorted.sum()
    if total <= 0:
        raise DataError("degenerate labels: no positive mass")
    cum_tp = np.cumsum(w_sorted)
    counts = np.arange(1, len(scores) + 1)
    boundary = np.append(s_sorted[1:] != s_sorted[:-1], True)
    tp = cum_tp[boundary]
    cnt = counts[boundary]
    precision = tp / cnt
    recall = tp / total
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def range_auc_pr(scores: np.ndarray, labels: np.ndarray, buffer: int) -> float:
    """AUC-PR against ramp-softened labels (buffer 0 = plain labels)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if buffer < 0:
        raise DataError("buffer must be >= 0")
    total_pos = int(labels.sum())
    if total_pos == 0 or total_pos == len(labels):
        raise DataError("degenerate labels: need both classes")
    return _soft_average_precision(scores, soften_labels(labels, buffer))


def vus_pr(scores: np.ndarray, labels: np.ndarray,
           width: int = DEFAULT_VUS_WIDTH) -> float:
    """Mean of range_auc_pr over buffer widths 0..W."""
    if width < 0:
        raise DataError("width must be >= 0")
    vals = [range_auc_pr(scores, labels, b) for b in range(width + 1)]
    return float(np.mean(vals))
