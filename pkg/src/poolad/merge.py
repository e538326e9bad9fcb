"""Similarity-based pool merging: pairwise parameter-space dissimilarity,
greedy one-merge-per-round pairing, parameter averaging, and the meta
refresh that follows a pool change."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import TimeSeries
from .errors import DataError
from .meta import MetaModel, MetaRow, MetaStore, observed_error, train_meta
from .model import ReconModel
from .pool import ModelPool, fingerprint, probe_series

_RAW_ZERO = 1e-12


@dataclass
class MergePolicy:
    eps_merge: int = 15  # pool-size trigger (strictly greater than)
    eps_disscore: float = 0.01
    timing: str = "after_test"

    def __post_init__(self):
        if self.eps_merge < 2:
            raise DataError("eps_merge must be >= 2")
        if self.eps_disscore <= 0:
            raise DataError("eps_disscore must be positive")
        if self.timing not in ("before_test", "after_test"):
            raise DataError("timing must be before_test or after_test")


@dataclass
class DissimilarityReport:
    """Raw and normalized per-pair components plus the final DS matrix."""

    model_ids: list[str]
    pairs: list[tuple[int, int]]
    raw: dict[str, np.ndarray]  # component -> per-pair raw values
    normalized: dict[str, np.ndarray]
    ds: np.ndarray  # symmetric matrix, zero diagonal

    def pair_scores(self) -> list[tuple[float, int, int]]:
        return [(float(self.ds[i, j]), i, j) for i, j in self.pairs]


def _minmax_normalize(raw: np.ndarray) -> np.ndarray:
    """Min-max across pairs; a zero range maps raw 0 to 0 and raw > 0 to 1
    (conservative: never merges distinct models on a degenerate scale)."""
    lo, hi = raw.min(), raw.max()
    if hi - lo < _RAW_ZERO:
        return np.where(np.abs(raw) < _RAW_ZERO, 0.0, 1.0)
    return (raw - lo) / (hi - lo)


def dissimilarity(pool: ModelPool) -> DissimilarityReport:
    """Per-pair dissimilarity score: mean of min-max-normalized euclidean,
    statistical, and cosine components of the flat parameter vectors."""
    k = len(pool)
    if k < 2:
        raise DataError("dissimilarity needs at least 2 models")
    thetas = [m.theta.astype(np.float64) for m in pool.models]
    if len({len(t) for t in thetas}) != 1:
        raise DataError("models have mismatched parameter shapes")
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    eucl = np.empty(len(pairs))
    stat = np.empty(len(pairs))
    cosd = np.empty(len(pairs))
    stats = [np.array([t.mean(), t.std(), t.min(), t.max()]) for t in thetas]
    norms = [np.linalg.norm(t) for t in thetas]
    for p, (i, j) in enumerate(pairs):
        d = thetas[i] - thetas[j]
        eucl[p] = np.linalg.norm(d)
        stat[p] = np.abs(stats[i] - stats[j]).mean()
        denom = norms[i] * norms[j]
        cos = float(thetas[i] @ thetas[j]) / denom if denom > _RAW_ZERO else 0.0
        cosd[p] = 1.0 - cos
    raw = {"euclidean": eucl, "statistical": stat, "cosine": cosd}
    normalized = {name: _minmax_normalize(v) for name, v in raw.items()}
    ds = np.zeros((k, k))
    scores = (normalized["euclidean"] + normalized["statistical"]
              + normalized["cosine"]) / 3.0
    for p, (i, j) in enumerate(pairs):
        ds[i, j] = ds[j, i] = scores[p]
    return DissimilarityReport(pool.model_ids(), pairs, raw, normalized, ds)


def plan_merges(report: DissimilarityReport,
                policy: MergePolicy) -> list[tuple[int, int]]:
    """Greedy ascending-DS pairing below the cutoff; each model appears in
    at most one pair, so one round removes at most half the pool."""
    candidates = sorted(
        (s for s in report.pair_scores() if s[0] < policy.eps_disscore),
        key=lambda s: (s[0], s[1], s[2]),
    )
    used: set[int] = set()
    plan = []
    for _, i, j in candidates:
        if i in used or j in used:
            continue
        plan.append((i, j))
        used.update((i, j))
    return plan


def merge_pair(pool: ModelPool, i: int, j: int, ds_value: float,
               probe: TimeSeries, round_idx: int) -> ReconModel:
    """Replace models i and j with their parameter mean; records lineage."""
    a, b = pool.models[i], pool.models[j]
    theta = ((a.theta.astype(np.float64) + b.theta.astype(np.float64)) / 2.0)
    child = ReconModel(theta.astype(np.float32), list(a.sizes),
                       np.zeros(len(a.theta), dtype=bool),
                       pool.next_model_id(),
                       f"merge({a.model_id},{b.model_id})")
    pool.manifest["lineage"].append({
        "round": round_idx,
        "parents": [a.model_id, b.model_id],
        "child": child.model_id,
        "ds": float(ds_value),
    })
    return child


def merge_round(pool: ModelPool, policy: MergePolicy) -> tuple[ModelPool, bool]:
    """Run merge rounds until no pair qualifies (capped at log2 |pool|).

    A no-op unless |pool| strictly exceeds eps_merge. Returns the pool and
    whether anything merged.
    """
    if len(pool) <= policy.eps_merge:
        return pool, False
    probe = probe_series()
    changed = False
    max_rounds = max(1, math.ceil(math.log2(len(pool))))
    for round_idx in range(max_rounds):
        if len(pool) < 2:
            break
        report = dissimilarity(pool)
        plan = plan_merges(report, policy)
        if not plan:
            break
        changed = True
        merged_away: set[int] = set()
        children = []
        for i, j in plan:
            children.append(merge_pair(pool, i, j, report.ds[i, j],
                                       probe, round_idx))
            merged_away.update((i, j))
        survivors = [m for idx, m in enumerate(pool.models)
                     if idx not in merged_away]
        pool.models = survivors
        pool.fingerprints = {m.model_id: pool.fingerprints[m.model_id]
                             for m in survivors}
        pool.manifest["order"] = pool.model_ids()
        for child in children:
            pool.add(child, probe)
    return pool, changed


def refresh_meta_after_merge(
    pool: ModelPool, store: MetaStore, meta: MetaModel | None,
    resolver: Callable[[str], TimeSeries | None],
    meta_seed: int = 0,
) -> tuple[MetaStore, MetaModel | None]:
    """Rebuild the store against the post-merge pool.

    Dataset feature columns are preserved. For datasets the resolver can
    still produce, rows are regenerated for the surviving/merged models;
    otherwise the original rows are re-tagged refresh-stale and excluded
    from training.
    """
    by_ref: dict[str, list[MetaRow]] = {}
    order: list[str] = []
    for r in store.rows:
        if r.dataset_ref not in by_ref:
            order.append(r.dataset_ref)
        by_ref.setdefault(r.dataset_ref, []).append(r)

    new_store = MetaStore()
    for ref in order:
        old_rows = by_ref[ref]
        ts = resolver(ref)
        if ts is None:
            for r in old_rows:
                new_store.rows.append(
                    MetaRow(r.dataset_ref, r.features, r.model_id,
                            r.fingerprint, r.target, "refresh-stale"))
            continue
        feats = old_rows[0].features  # dataset features remain unchanged
        for m in pool.models:
            new_store.append(MetaRow(ref, feats, m.model_id,
                                     pool.fingerprints[m.model_id],
                                     observed_error(m, ts, pool.stride),
                                     "refresh"))
    new_version = (meta.version + 1) if meta is not None else 1
    new_meta = train_meta(new_store, seed=meta_seed, version=new_version)
    pool.manifest["meta_version"] = new_meta.version
    return new_store, new_meta
