"""Ensembling head: per-model anomaly scoring, thirteen unsupervised proxy
rankings (4 prediction-error, 5 synthetic-anomaly, 4 centrality), and
Top-k Borda aggregation into one averaged anomaly score."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import AnomalySpec, TimeSeries, inject_anomaly, ANOMALY_KINDS
from .detect import auc_pr
from .errors import DataError
from .model import ReconModel, point_errors, reconstruct

MAPE_FLOOR = 0.01
SYNTH_MIN_LENGTH = 64
SYNTH_INSTANCES = 5
DEFAULT_TOP_K = 3


@dataclass
class ScoreMatrix:
    """Per-model per-point anomaly scores, with reconstructions retained
    for the prediction-error rankings. Row order = creation order."""

    model_ids: list[str]
    scores: np.ndarray  # (n_models, m)
    recons: np.ndarray  # (n_models, m, n)

    @property
    def n_models(self) -> int:
        return len(self.model_ids)


@dataclass
class RankTable:
    """Named rankings (model ids, best first), each a permutation of the
    subset; ties everywhere break by creation order."""

    rankings: dict[str, list[str]] = field(default_factory=dict)

    def add(self, name: str, ranking: list[str]) -> None:
        self.rankings[name] = ranking

    def __len__(self) -> int:
        return len(self.rankings)


def score_models(subset: list[ReconModel], ts: TimeSeries,
                 stride: int) -> ScoreMatrix:
    """Anomaly score of each model at each point: dimension-mean squared
    reconstruction error."""
    if not subset:
        raise DataError("empty model subset")
    recons = np.stack([reconstruct(m, ts, stride) for m in subset])
    scores = ((ts.values[None, :, :] - recons) ** 2).mean(axis=2)
    return ScoreMatrix([m.model_id for m in subset], scores, recons)


def _ascending_ranking(ids: list[str], values: np.ndarray) -> list[str]:
    order = sorted(range(len(ids)), key=lambda i: (values[i], i))
    return [ids[i] for i in order]


def rank_prediction_error(matrix: ScoreMatrix, ts: TimeSeries) -> RankTable:
    """Whole-series MSE / MAE / RMSE / MAPE rankings, ascending error."""
    table = RankTable()
    x = ts.values
    diffs = matrix.recons - x[None, :, :]
    mse = (diffs**2).mean(axis=(1, 2))
    mae = np.abs(diffs).mean(axis=(1, 2))
    rmse = np.sqrt(mse)
    denom = np.maximum(np.abs(x), MAPE_FLOOR)
    mape = (np.abs(diffs) / denom[None, :, :]).mean(axis=(1, 2))
    for name, vals in (("mse", mse), ("mae", mae),
                       ("rmse", rmse), ("mape", mape)):
        table.add(f"pred_{name}", _ascending_ranking(matrix.model_ids, vals))
    return table


def _synthetic_plan(kind: str, ts: TimeSeries,
                    rng: np.random.Generator) -> list[AnomalySpec]:
    m, n = ts.values.shape
    length = 1 if kind == "spike" else max(4, m // 100)
    if m - length < 1:
        return []
    specs = []
    for _ in range(SYNTH_INSTANCES):
        start = int(rng.integers(0, m - length))
        dim = int(rng.integers(0, n))
        specs.append(AnomalySpec(kind, start, length, 3.0, (dim,)))
    return specs


def rank_synthetic(subset: list[ReconModel], ts: TimeSeries, seed: int,
                   stride: int) -> RankTable:
    """Per anomaly type: inject seeded instances, score every model, rank
    by point-wise AUC-PR against the injected labels (descending)."""
    if ts.m < SYNTH_MIN_LENGTH:
        raise DataError(f"synthetic ranking needs >= {SYNTH_MIN_LENGTH} points")
    table = RankTable()
    ids = [m.model_id for m in subset]
    for kind_idx, kind in enumerate(ANOMALY_KINDS):
        rng = np.random.default_rng([seed, kind_idx])
        specs = _synthetic_plan(kind, ts, rng)
        if not specs:
            warnings.warn(f"series too short to inject {kind}; skipping",
                          stacklevel=2)
            continue
        injected = ts.copy()
        injected.labels = None
        for spec in specs:
            injected = inject_anomaly(injected, spec, seed)
        labels = injected.labels
        if labels.sum() == 0 or labels.sum() == len(labels):
            warnings.warn(f"degenerate injection for {kind}; skipping",
                          stacklevel=2)
            continue
        aucs = np.array([
            auc_pr(point_errors(m, injected, stride), labels) for m in subset
        ])
        order = sorted(range(len(ids)), key=lambda i: (-aucs[i], i))
        table.add(f"synth_{kind}", [ids[i] for i in order])
    return table


# -- centrality clustering (from scratch) -----------------------------------


def _z_rows(scores: np.ndarray) -> np.ndarray:
    mean = scores.mean(axis=1, keepdims=True)
    std = scores.std(axis=1, keepdims=True)
    std[std < 1e-12] = 1.0
    return (scores - mean) / std


def _pairwise_dist(z: np.ndarray) -> np.ndarray:
    diff = z[:, None, :] - z[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def _nn_centrality(dist: np.ndarray) -> np.ndarray:
    masked = dist + np.diag(np.full(len(dist), np.inf))
    return masked.min(axis=1)


def _kmedoids(dist: np.ndarray, k: int, seed: int) -> np.ndarray:
    """PAM with seeded init; returns the medoid index of each point."""
    n = len(dist)
    rng = np.random.default_rng(seed)
    medoids = list(rng.choice(n, size=k, replace=False))

    def cost(meds):
        return dist[:, meds].min(axis=1).sum()

    best = cost(medoids)
    improved = True
    while improved:
        improved = False
        for mi in range(k):
            for cand in range(n):
                if cand in medoids:
                    continue
                trial = medoids.copy()
                trial[mi] = cand
                c = cost(trial)
                if c < best - 1e-12:
                    best, medoids, improved = c, trial, True
    assign = np.array(medoids)[dist[:, medoids].argmin(axis=1)]
    return assign


def _affinity_propagation(sim: np.ndarray, damping: float = 0.7,
                          iterations: int = 200) -> np.ndarray | None:
    """Plain affinity propagation; returns each point's exemplar index, or
    None when no exemplar emerges (non-convergence)."""
    n = len(sim)
    r = np.zeros((n, n))
    a = np.zeros((n, n))
    for _ in range(iterations):
        as_ = a + sim
        idx = as_.argmax(axis=1)
        first = as_[np.arange(n), idx]
        as_[np.arange(n), idx] = -np.inf
        second = as_.max(axis=1)
        r_new = sim - first[:, None]
        r_new[np.arange(n), idx] = sim[np.arange(n), idx] - second
        r = damping * r + (1 - damping) * r_new

        rp = np.maximum(r, 0)
        np.fill_diagonal(rp, r.diagonal())
        a_new = np.minimum(0, rp.sum(axis=0)[None, :] - rp)
        diag = rp.sum(axis=0) - rp.diagonal()
        np.fill_diagonal(a_new, diag)
        a = damping * a + (1 - damping) * a_new
    exemplars = np.where((r.diagonal() + a.diagonal()) > 0)[0]
    if len(exemplars) == 0:
        return None
    assign = exemplars[sim[:, exemplars].argmax(axis=1)]
    assign[exemplars] = exemplars
    return assign


def _farthest_first_order(dist: np.ndarray) -> list[int]:
    """Greedy farthest-first traversal seeded with the max-distance pair."""
    n = len(dist)
    i, j = np.unravel_index(np.argmax(dist), dist.shape)
    if n < 2:
        return [0]
    # traverse the more isolated member of the pair first so that, after the
    # caller reverses the order, it lands at the bottom of the ranking
    si, sj = dist[i].sum(), dist[j].sum()
    if (si, i) > (sj, j):
        selected = [int(i), int(j)]
    else:
        selected = [int(j), int(i)]
    while len(selected) < n:
        remaining = [p for p in range(n) if p not in selected]
        dmin = [(min(dist[p, s] for s in selected), p) for p in remaining]
        _, pick = max(dmin, key=lambda t: (t[0], -t[1]))
        selected.append(pick)
    return selected


def rank_centrality(matrix: ScoreMatrix, seed: int = 0) -> RankTable:
    """Four clustering-based centrality rankings over z-normalized score
    rows (euclidean distances). Central models rank first."""
    if matrix.n_models < 2:
        raise DataError("centrality ranking needs >= 2 models")
    ids = matrix.model_ids
    n = matrix.n_models
    z = _z_rows(matrix.scores)
    dist = _pairwise_dist(z)
    table = RankTable()

    table.add("centr_nn", _ascending_ranking(ids, _nn_centrality(dist)))

    k = min(2, n - 1)
    assign = _kmedoids(dist, k, seed)
    to_medoid = dist[np.arange(n), assign].copy()
    is_medoid = np.array([i == assign[i] for i in range(n)])
    sizes = {m: int((assign == m).sum()) for m in np.unique(assign)}
    # a singleton medoid is just an isolated point; measure it against the
    # nearest populated cluster instead of itself, and drop its privilege
    real = [m for m, s in sizes.items() if s >= 2]
    privileged = is_medoid.copy()
    for i in range(n):
        if is_medoid[i] and sizes[i] == 1 and real:
            to_medoid[i] = min(dist[i, m] for m in real)
            privileged[i] = False
    order = sorted(range(n), key=lambda i: (not privileged[i], to_medoid[i], i))
    table.add("centr_kmedoids", [ids[i] for i in order])

    sim = -(dist**2)
    off = sim[~np.eye(n, dtype=bool)]
    np.fill_diagonal(sim, np.median(off))
    assign_ap = _affinity_propagation(sim)
    if assign_ap is None:
        warnings.warn("affinity propagation found no exemplars; "
                      "falling back to nearest-neighbor ranking",
                      stacklevel=2)
        table.add("centr_ap", table.rankings["centr_nn"])
    else:
        to_ex = sim[np.arange(n), assign_ap]
        is_ex = np.array([i == assign_ap[i] for i in range(n)])
        ex_sizes = {e: int((assign_ap == e).sum()) for e in np.unique(assign_ap)}
        real_ex = [e for e, s in ex_sizes.items() if s >= 2]
        privileged_ex = is_ex.copy()
        for i in range(n):
            if is_ex[i] and ex_sizes[i] == 1 and real_ex:
                to_ex[i] = max(sim[i, e] for e in real_ex)
                privileged_ex[i] = False
        order = sorted(range(n),
                       key=lambda i: (not privileged_ex[i], -to_ex[i], i))
        table.add("centr_ap", [ids[i] for i in order])

    sel = _farthest_first_order(dist)
    table.add("centr_farthest", [ids[i] for i in reversed(sel)])
    return table


# -- aggregation -------------------------------------------------------------


def normalize_rows(scores: np.ndarray) -> np.ndarray:
    """Min-max each row to [0, 1]; constant rows become all zeros."""
    lo = scores.min(axis=1, keepdims=True)
    hi = scores.max(axis=1, keepdims=True)
    rng = hi - lo
    out = np.where(rng < 1e-12, 0.0, (scores - lo) / np.where(rng < 1e-12, 1.0, rng))
    return out


def borda_points(table: RankTable, ids: list[str]) -> dict[str, int]:
    """Positional Borda count: the best position in each ranking earns
    len(ids) points, the worst earns 1."""
    points = {mid: 0 for mid in ids}
    n = len(ids)
    for ranking in table.rankings.values():
        for pos, mid in enumerate(ranking):
            points[mid] += n - pos
    return points


def borda_topk(table: RankTable, k: int, matrix: ScoreMatrix
               ) -> tuple[list[str], np.ndarray]:
    """Select the k models with the highest total Borda points and average
    their min-max-normalized score rows. When k covers the whole subset,
    ranking is skipped and all rows are averaged directly."""
    ids = matrix.model_ids
    normed = normalize_rows(matrix.scores)
    if k >= len(ids) or len(ids) == 1:
        return list(ids), normed.mean(axis=0)
    points = borda_points(table, ids)
    order = sorted(range(len(ids)), key=lambda i: (-points[ids[i]], i))
    selected = [ids[i] for i in order[:k]]
    rows = np.stack([normed[ids.index(mid)] for mid in selected])
    return selected, rows.mean(axis=0)


def build_rank_table(subset: list[ReconModel], matrix: ScoreMatrix,
                     ts: TimeSeries, seed: int, stride: int) -> RankTable:
    """All thirteen proxy rankings for a subset of at least two models."""
    table = RankTable()
    table.rankings.update(rank_prediction_error(matrix, ts).rankings)
    table.rankings.update(rank_synthetic(subset, ts, seed, stride).rankings)
    table.rankings.update(rank_centrality(matrix, seed).rankings)
    return table


def ensemble_scores(subset: list[ReconModel], ts: TimeSeries, k: int,
                    seed: int, stride: int
                    ) -> tuple[list[str], np.ndarray, RankTable | None]:
    """Full ensembling path: scoring, rankings, Borda top-k, averaging.

    With a single model the pipeline reduces to that model's normalized
    score and no ranking is executed.
    """
    matrix = score_models(subset, ts, stride)
    if len(subset) == 1 or k >= len(subset):
        selected, final = borda_topk(RankTable(), k, matrix)
        return selected, final, None
    table = build_rank_table(subset, matrix, ts, seed, stride)
    selected, final = borda_topk(table, k, matrix)
    return selected, final, table
