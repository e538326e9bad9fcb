"""Model pool container: sequential construction over training datasets,
behavior fingerprints against a fixed probe series, and on-disk
persistence (manifest.json + models/<id>.bin + probe.csv)."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import TimeSeries, save_csv
from .errors import DataError, DivergenceError, IntegrityError
from .features import extract_features
from .model import (ReconModel, TrainConfig, average_parameters, load_model,
                    new_model, point_errors, save_model, train,
                    transfer_parameters)

PROBE_SEED = 42
PROBE_LENGTH = 512
PROBE_DIMS = 4
MANIFEST_NAME = "manifest.json"


def probe_series() -> TimeSeries:
    """Fixed 512x4 multi-regime probe: sinusoid, AR(1), trend, level shift.

    Deterministic (seed 42) so fingerprints are comparable across runs
    and machines.
    """
    rng = np.random.default_rng(PROBE_SEED)
    m = PROBE_LENGTH
    t = np.arange(m)
    sine = np.sin(2 * np.pi * t / 32.0) + 0.05 * rng.standard_normal(m)
    ar = np.empty(m)
    eps = rng.standard_normal(m)
    ar[0] = eps[0]
    for i in range(1, m):
        ar[i] = 0.85 * ar[i - 1] + 0.3 * eps[i]
    trend = 0.004 * t + 0.1 * rng.standard_normal(m)
    shift = 0.2 * rng.standard_normal(m)
    shift[m // 2 :] += 1.5
    return TimeSeries(np.column_stack([sine, ar, trend, shift]))


@dataclass
class ModelPool:
    """Ordered collection of reconstruction models plus fingerprints and
    a manifest recording creation order and merge lineage."""

    models: list[ReconModel] = field(default_factory=list)
    fingerprints: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    stride: int = 16

    def __post_init__(self):
        self.manifest.setdefault("order", [m.model_id for m in self.models])
        self.manifest.setdefault("lineage", [])
        self.manifest.setdefault("meta_version", 0)
        self.manifest.setdefault("next_id", len(self.models))
        self.manifest.setdefault("stride", self.stride)

    def __len__(self) -> int:
        return len(self.models)

    @property
    def segment_length(self) -> int:
        return self.models[0].segment_length

    def model_ids(self) -> list[str]:
        return [m.model_id for m in self.models]

    def get(self, model_id: str) -> ReconModel:
        for m in self.models:
            if m.model_id == model_id:
                return m
        raise KeyError(model_id)

    def next_model_id(self) -> str:
        mid = f"m{self.manifest['next_id']}"
        self.manifest["next_id"] += 1
        return mid

    def add(self, model: ReconModel, probe: TimeSeries) -> None:
        if self.models and model.segment_length != self.segment_length:
            raise DataError("segment length mismatch with pool")
        if model.model_id in self.fingerprints:
            raise DataError(f"duplicate model id {model.model_id}")
        self.models.append(model)
        self.fingerprints[model.model_id] = fingerprint(model, probe, self.stride)
        self.manifest["order"].append(model.model_id)


def fingerprint(model: ReconModel, probe: TimeSeries, stride: int) -> np.ndarray:
    """Feature vector of the model's per-point reconstruction-error series
    on the probe. A pure function of the model's behavior."""
    err = point_errors(model, probe, stride)
    return extract_features(TimeSeries(err.reshape(-1, 1)))


def construct_pool(datasets: list[TimeSeries], cfg: TrainConfig,
                   hidden: list[int], segment_length: int,
                   dataset_tags: list[str] | None = None) -> ModelPool:
    """Sequentially train one model per dataset.

    Model 0 starts fresh; model i receives a frozen beta-fraction of model
    i-1's parameters and trains against the pool loss with models 0..i-1
    as diversity priors.
    """
    if not datasets:
        raise DataError("no datasets")
    tags = dataset_tags or [f"dataset{i}" for i in range(len(datasets))]
    pool = ModelPool(stride=cfg.stride)
    probe = probe_series()
    for i, ts in enumerate(datasets):
        mid = pool.next_model_id()
        if i == 0:
            candidate = new_model(segment_length, hidden, cfg.seed, mid, tags[i])
        else:
            candidate = transfer_parameters(pool.models[-1], cfg.beta,
                                            cfg.seed + i, mid, tags[i])
        try:
            trained = train(candidate, ts, list(pool.models), cfg)
        except DivergenceError as exc:
            raise DivergenceError(exc.epoch,
                                  f"dataset {i}: {exc}") from exc
        pool.add(trained, probe)
    return pool


def save_pool(pool: ModelPool, dirpath) -> None:
    """Write manifest.json, models/<id>.bin, and probe.csv."""
    os.makedirs(dirpath, exist_ok=True)
    models_dir = os.path.join(dirpath, "models")
    os.makedirs(models_dir, exist_ok=True)
    for m in pool.models:
        save_model(m, os.path.join(models_dir, f"{m.model_id}.bin"))
    manifest = dict(pool.manifest)
    manifest["order"] = pool.model_ids()
    manifest["stride"] = pool.stride
    manifest["fingerprints"] = {
        mid: [float(v) for v in fp] for mid, fp in pool.fingerprints.items()
    }
    with open(os.path.join(dirpath, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    save_csv(probe_series(), os.path.join(dirpath, "probe.csv"))


def load_pool(dirpath) -> ModelPool:
    manifest_path = os.path.join(dirpath, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise IntegrityError(f"missing {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise IntegrityError(f"corrupt manifest {manifest_path}") from exc
    order = manifest.get("order", [])
    if not order:
        raise IntegrityError(f"{manifest_path}: empty model order")
    fingerprints_raw = manifest.pop("fingerprints", {})
    models = []
    for mid in order:
        path = os.path.join(dirpath, "models", f"{mid}.bin")
        if not os.path.exists(path):
            raise IntegrityError(f"missing model file {path}")
        models.append(load_model(path))
    if len(models) != len(order):
        raise IntegrityError(f"{manifest_path}: model count mismatch")
    fingerprints = {mid: np.asarray(fp, dtype=np.float64)
                    for mid, fp in fingerprints_raw.items()}
    missing = [mid for mid in order if mid not in fingerprints]
    if missing:
        raise IntegrityError(f"{manifest_path}: missing fingerprints for {missing}")
    return ModelPool(models, fingerprints, manifest,
                     stride=int(manifest.get("stride", 16)))


def transfer_source(pool: ModelPool, mode: str) -> ReconModel:
    """Source model for a new pool member: the last model, or the
    parameter average of the whole pool."""
    if mode == "average":
        return average_parameters(pool.models)
    return pool.models[-1]
