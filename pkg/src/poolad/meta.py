"""Meta-model layer: predicts a pool model's reconstruction error on a new
dataset from (dataset features, model fingerprint), gates pool expansion,
and keeps its own training store in sync with pool mutations."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import TimeSeries
from .errors import DataError, IntegrityError
from .features import FEATURE_DIM, extract_features
from .model import (ReconModel, TrainConfig, mlp_backward, mlp_forward,
                    point_errors, train, transfer_parameters)
from .pool import ModelPool, fingerprint, probe_series, transfer_source

META_HIDDEN = [32, 16]
_STD_GUARD = 1e-8


@dataclass
class ExpansionPolicy:
    """Thresholds gating reuse vs new-model creation."""

    eps_model: float = 0.8
    eps_judge_factor: float = 0.34

    def __post_init__(self):
        if not 0 < self.eps_judge_factor <= 1:
            raise DataError("eps_judge_factor must be in (0, 1]")


@dataclass
class MetaRow:
    dataset_ref: str
    features: np.ndarray
    model_id: str
    fingerprint: np.ndarray
    target: float
    tag: str  # initial | expansion | refresh | refresh-stale


@dataclass
class MetaStore:
    """Append log of (dataset features, model fingerprint, observed error)."""

    rows: list[MetaRow] = field(default_factory=list)

    def append(self, row: MetaRow) -> None:
        if row.target < 0:
            raise DataError("observed error must be non-negative")
        self.rows.append(row)

    def trainable(self) -> list[MetaRow]:
        return [r for r in self.rows if r.tag != "refresh-stale"]

    def __len__(self) -> int:
        return len(self.rows)

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            header = (["dataset_ref", "model_id", "tag", "target"]
                      + [f"f{i}" for i in range(FEATURE_DIM)]
                      + [f"p{i}" for i in range(FEATURE_DIM)])
            writer.writerow(header)
            for r in self.rows:
                writer.writerow([r.dataset_ref, r.model_id, r.tag, repr(r.target)]
                                + [repr(float(v)) for v in r.features]
                                + [repr(float(v)) for v in r.fingerprint])

    @classmethod
    def load(cls, path) -> "MetaStore":
        store = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)  # header
            for row in reader:
                ref, mid, tag, target = row[0], row[1], row[2], float(row[3])
                feats = np.array([float(v) for v in row[4 : 4 + FEATURE_DIM]])
                fp = np.array([float(v) for v in row[4 + FEATURE_DIM :]])
                store.rows.append(MetaRow(ref, feats, mid, fp, target, tag))
        return store


@dataclass
class MetaModel:
    """Small MLP regressor on standardized (features + fingerprint) inputs,
    predicting the standardized observed error."""

    theta: np.ndarray
    sizes: list[int]
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    version: int = 1

    def predict_standardized(self, x: np.ndarray) -> float:
        """Predicted error in z-score units of the training targets."""
        xs = (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_scale
        out = mlp_forward(self.theta.astype(np.float64), self.sizes,
                          xs.reshape(1, -1))
        return float(out[0, 0])

    def predict(self, x: np.ndarray) -> float:
        """Predicted error back on the original target scale."""
        return self.predict_standardized(x) * self.y_scale + self.y_mean

    def save(self, dirpath) -> None:
        import struct
        from .model import _MAGIC, MODEL_FORMAT_VERSION
        os.makedirs(dirpath, exist_ok=True)
        header = {
            "format_version": MODEL_FORMAT_VERSION,
            "sizes": self.sizes,
            "kind": "meta",
            "n_params": len(self.theta),
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(os.path.join(dirpath, "meta.bin"), "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(np.asarray(self.theta, dtype="<f4").tobytes())
        side = {
            "x_mean": [float(v) for v in self.x_mean],
            "x_scale": [float(v) for v in self.x_scale],
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "version": self.version,
            "sizes": self.sizes,
        }
        with open(os.path.join(dirpath, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(side, fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, dirpath) -> "MetaModel":
        import struct
        from .model import _MAGIC
        side_path = os.path.join(dirpath, "meta.json")
        bin_path = os.path.join(dirpath, "meta.bin")
        for p in (side_path, bin_path):
            if not os.path.exists(p):
                raise IntegrityError(f"missing meta artifact {p}")
        with open(side_path, encoding="utf-8") as fh:
            side = json.load(fh)
        with open(bin_path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != _MAGIC:
            raise IntegrityError(f"{bin_path}: bad magic bytes")
        (hlen,) = struct.unpack("<I", raw[4:8])
        theta = np.frombuffer(raw[8 + hlen :], dtype="<f4").copy()
        return cls(theta, list(side["sizes"]),
                   np.asarray(side["x_mean"]), np.asarray(side["x_scale"]),
                   float(side["y_mean"]), float(side["y_scale"]),
                   int(side["version"]))


def observed_error(model: ReconModel, ts: TimeSeries,
                   stride: int | None = None) -> float:
    """Mean per-point reconstruction error of the model on the series."""
    stride = stride or max(1, model.segment_length // 2)
    return float(point_errors(model, ts, stride).mean())


def _train_fold(x: np.ndarray, y: np.ndarray, val_x: np.ndarray,
                val_y: np.ndarray, sizes: list[int], seed: int,
                epochs: int, lr: float, batch_size: int) -> tuple[np.ndarray, float]:
    """Train one fold; returns (theta, best validation loss).

    Early stop after 10 validation epochs without improvement; learning
    rate halves after 20 training epochs without improvement.
    """
    from .model import init_theta, param_count
    rng = np.random.default_rng(seed)
    theta = init_theta(sizes, rng).astype(np.float64)
    # zero the output layer so predictions start at the (standardized)
    # target mean
    last = sizes[-1] * sizes[-2] + sizes[-1]
    theta[param_count(sizes) - last :] = 0.0
    best_theta, best_val = theta.copy(), np.inf
    best_train = np.inf
    val_stagnant = train_stagnant = 0
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            out, cache = mlp_forward(theta, sizes, x[idx], want_cache=True)
            diff = out[:, 0] - y[idx]
            epoch_loss += float(diff @ diff)
            d_out = (2.0 * diff / len(idx)).reshape(-1, 1)
            grad = mlp_backward(theta, sizes, cache, d_out)
            theta -= lr * grad
        epoch_loss /= n
        pred = mlp_forward(theta, sizes, val_x)[:, 0]
        val_loss = float(((pred - val_y) ** 2).mean())
        if val_loss < best_val - 1e-12:
            best_val, best_theta = val_loss, theta.copy()
            val_stagnant = 0
        else:
            val_stagnant += 1
            if val_stagnant >= 10:
                break
        if epoch_loss < best_train - 1e-12:
            best_train, train_stagnant = epoch_loss, 0
        else:
            train_stagnant += 1
            if train_stagnant >= 20:
                lr *= 0.5
                train_stagnant = 0
    return best_theta, best_val


def train_meta(store: MetaStore, k_folds: int = 5, seed: int = 0,
               epochs: int = 300, lr: float = 1e-2, batch_size: int = 16,
               version: int | None = None) -> MetaModel:
    """K-fold training of the meta regressor; keeps the fold with the
    lowest validation loss. Inputs and targets are z-standardized with
    the statistics persisted on the returned model."""
    rows = store.trainable()
    if len(rows) < 2 * k_folds:
        raise DataError(
            f"meta training needs >= {2 * k_folds} rows, got {len(rows)}")
    x = np.stack([np.concatenate([r.features, r.fingerprint]) for r in rows])
    y = np.array([r.target for r in rows], dtype=np.float64)
    x_mean = x.mean(axis=0)
    x_scale = np.where(x.std(axis=0) < _STD_GUARD, 1.0, x.std(axis=0))
    y_mean = float(y.mean())
    y_scale = float(y.std()) if y.std() >= _STD_GUARD else 1.0
    xs = (x - x_mean) / x_scale
    ys = (y - y_mean) / y_scale

    sizes = [xs.shape[1]] + META_HIDDEN + [1]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ys))
    folds = np.array_split(order, k_folds)
    best_theta, best_val = None, np.inf
    for f, val_idx in enumerate(folds):
        train_idx = np.setdiff1d(order, val_idx)
        theta, val = _train_fold(xs[train_idx], ys[train_idx],
                                 xs[val_idx], ys[val_idx],
                                 sizes, seed + f, epochs, lr, batch_size)
        if val < best_val:
            best_theta, best_val = theta, val
    return MetaModel(best_theta.astype(np.float32), sizes, x_mean, x_scale,
                     y_mean, y_scale,
                     version=version if version is not None else 1)


def match_scores(meta: MetaModel, pool: ModelPool,
                 ts_features: np.ndarray) -> dict[str, float]:
    """Match score per pool model: the negated standardized predicted
    error, so better-predicted models score higher."""
    return {
        m.model_id: -meta.predict_standardized(
            np.concatenate([ts_features, pool.fingerprints[m.model_id]]))
        for m in pool.models
    }


def expansion_decision(n_matched: int, pool_size: int,
                       policy: ExpansionPolicy) -> str:
    return "reuse" if n_matched > policy.eps_judge_factor * pool_size \
        else "create_new"


def match_models(meta, pool: ModelPool, ts: TimeSeries,
                 policy: ExpansionPolicy) -> tuple[list[ReconModel], str]:
    """Select the matched subset and decide reuse vs create_new.

    ``meta`` only needs a predict_standardized(x) method, so tests can
    inject canned predictions.
    """
    feats = extract_features(ts)
    subset = []
    for m in pool.models:
        x = np.concatenate([feats, pool.fingerprints[m.model_id]])
        if -meta.predict_standardized(x) > policy.eps_model:
            subset.append(m)
    return subset, expansion_decision(len(subset), len(pool), policy)


def append_dataset_rows(store: MetaStore, pool: ModelPool, ts: TimeSeries,
                        dataset_ref: str, tag: str) -> int:
    """One store row per pool model for this dataset; returns rows added."""
    feats = extract_features(ts)
    for m in pool.models:
        store.append(MetaRow(dataset_ref, feats, m.model_id,
                             pool.fingerprints[m.model_id],
                             observed_error(m, ts, pool.stride), tag))
    return len(pool.models)


def expand_pool(pool: ModelPool, ts: TimeSeries, cfg: TrainConfig,
                meta: MetaModel | None, store: MetaStore,
                dataset_ref: str = "", transfer: str = "last",
                meta_seed: int = 0) -> tuple[ModelPool, MetaModel, MetaStore]:
    """Train a new model on the incoming series and retrain the meta-model.

    Existing models are never retrained or modified; the store gains one
    row per model (old and new) for the new dataset.
    """
    probe = probe_series()
    source = transfer_source(pool, transfer)
    mid = pool.next_model_id()
    candidate = transfer_parameters(source, cfg.beta,
                                    cfg.seed + pool.manifest["next_id"],
                                    mid, dataset_ref or "expansion")
    trained = train(candidate, ts, list(pool.models), cfg)
    pool.add(trained, probe)
    append_dataset_rows(store, pool, ts, dataset_ref, "expansion")
    new_version = (meta.version + 1) if meta is not None else 1
    new_meta = train_meta(store, seed=meta_seed, version=new_version)
    pool.manifest["meta_version"] = new_meta.version
    return pool, new_meta, store
