"""Dimension-independent segment reconstruction network.

A small MLP autoencoder over length-L segments (tanh hidden layers,
affine output) with a flat parameter vector, a frozen-parameter mask for
transfer, exact reverse-mode gradients, and mini-batch gradient descent
on the pool training loss (reconstruction MSE minus a weighted diversity
term against earlier pool models).

Parameters are canonically float32 (the on-disk format); all arithmetic
runs in float64 and is cast back, so save/load round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .data import SegmentedView, TimeSeries, full_cover_view, reassemble
from .errors import DataError, DivergenceError, IntegrityError

MODEL_FORMAT_VERSION = 1
_MAGIC = b"PADM"


@dataclass
class ReconModel:
    """Flat parameter vector plus layer sizes and a frozen mask."""

    theta: np.ndarray  # float32, flat
    sizes: list[int]  # [L, hidden..., L]
    frozen_mask: np.ndarray  # bool, same length as theta
    model_id: str = ""
    trained_on: str = ""

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float32)
        self.frozen_mask = np.asarray(self.frozen_mask, dtype=bool)
        if self.sizes[0] != self.sizes[-1]:
            raise DataError("input and output width must both equal segment length")
        if len(self.theta) != param_count(self.sizes):
            raise DataError("theta length does not match layer sizes")
        if len(self.frozen_mask) != len(self.theta):
            raise DataError("frozen mask length does not match theta")
        if not np.all(np.isfinite(self.theta)):
            raise DataError("theta contains non-finite values")

    @property
    def segment_length(self) -> int:
        return self.sizes[0]

    def copy(self) -> "ReconModel":
        return ReconModel(
            self.theta.copy(), list(self.sizes), self.frozen_mask.copy(),
            self.model_id, self.trained_on,
        )


@dataclass
class TrainConfig:
    """Gradient-descent settings for one model's training."""

    epochs: int = 50
    learning_rate: float = 1e-2
    batch_size: int = 64
    mu: float = 2.0  # diversity weight
    beta: float = 0.3  # transfer fraction, [0, 1)
    seed: int = 0
    stride: int = 16  # segmentation stride for training windows

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise DataError("learning rate must be positive")
        if not 0 <= self.beta < 1:
            raise DataError("beta must be in [0, 1)")
        if self.mu < 0:
            raise DataError("mu must be non-negative")


def param_count(sizes: list[int]) -> int:
    return sum(sizes[i + 1] * sizes[i] + sizes[i + 1] for i in range(len(sizes) - 1))


def unpack_params(theta: np.ndarray, sizes: list[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer (W, b) views."""
    layers = []
    off = 0
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        w = theta[off : off + fan_out * fan_in].reshape(fan_out, fan_in)
        off += fan_out * fan_in
        b = theta[off : off + fan_out]
        off += fan_out
        layers.append((w, b))
    return layers


def init_theta(sizes: list[int], rng: np.random.Generator) -> np.ndarray:
    """Uniform +-1/sqrt(fan_in) init for every position of each layer."""
    parts = []
    for i in range(len(sizes) - 1):
        bound = 1.0 / np.sqrt(sizes[i])
        count = sizes[i + 1] * sizes[i] + sizes[i + 1]
        parts.append(rng.uniform(-bound, bound, size=count))
    return np.concatenate(parts).astype(np.float32)


def new_model(length: int, hidden: list[int], seed: int, model_id: str = "",
              trained_on: str = "") -> ReconModel:
    sizes = [length] + list(hidden) + [length]
    rng = np.random.default_rng(seed)
    theta = init_theta(sizes, rng)
    return ReconModel(theta, sizes, np.zeros(len(theta), dtype=bool),
                      model_id, trained_on)


def mlp_forward(theta64: np.ndarray, sizes: list[int], x: np.ndarray,
                want_cache: bool = False):
    """Run a batch (B, L) through the network: tanh hidden, affine output."""
    layers = unpack_params(theta64, sizes)
    h = x
    cache = [h]
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        cache.append(h)
    return (h, cache) if want_cache else h


def mlp_backward(theta64: np.ndarray, sizes: list[int],
                 cache: list[np.ndarray], d_out: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of a scalar loss w.r.t. the flat parameters,
    given d(loss)/d(output)."""
    layers = unpack_params(theta64, sizes)
    grad = np.zeros_like(theta64)
    gl = unpack_params(grad, sizes)
    delta = d_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = gl[i]
        if i < len(layers) - 1:
            delta = delta * (1.0 - cache[i + 1] ** 2)  # tanh'
        gw += delta.T @ cache[i]
        gb += delta.sum(axis=0)
        delta = delta @ w
    return grad


def forward(model: ReconModel, view: SegmentedView) -> np.ndarray:
    """Reconstruct the covered portion of a segmented series.

    Each window runs through the network independently of its dimension;
    overlapping window outputs are averaged per point.
    """
    if view.segment_length != model.segment_length:
        raise DataError(
            f"segment length {view.segment_length} does not match model "
            f"length {model.segment_length}"
        )
    out = mlp_forward(model.theta.astype(np.float64), model.sizes, view.segments)
    return reassemble(view, out)


def reconstruct(model: ReconModel, ts: TimeSeries, stride: int) -> np.ndarray:
    """Full-coverage reconstruction (m, n): adds a tail-aligned window per
    dimension so no trailing points are left uncovered."""
    view = full_cover_view(ts, model.segment_length, stride)
    return forward(model, view)


def point_errors(model: ReconModel, ts: TimeSeries, stride: int) -> np.ndarray:
    """Per-point anomaly score: dimension-mean squared reconstruction error."""
    xhat = reconstruct(model, ts, stride)
    return ((ts.values - xhat) ** 2).mean(axis=1)


def mse_loss(x: np.ndarray, xhat: np.ndarray) -> float:
    """Sum over time points of the per-point dimension-mean squared error."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xhat = np.atleast_2d(np.asarray(xhat, dtype=np.float64))
    if x.shape != xhat.shape:
        raise DataError(f"shape mismatch {x.shape} vs {xhat.shape}")
    return float(((x - xhat) ** 2).mean(axis=1).sum())


def diversity(mi: ReconModel, mj: ReconModel, ts: TimeSeries,
              stride: int | None = None) -> float:
    """Mean squared difference between the two models' reconstructions."""
    if mi.segment_length != mj.segment_length:
        raise DataError("models have different segment lengths")
    stride = stride or max(1, mi.segment_length // 2)
    ri = reconstruct(mi, ts, stride)
    rj = reconstruct(mj, ts, stride)
    return float(((ri - rj) ** 2).mean())


def pool_loss(model: ReconModel, ts: TimeSeries, prior: list[ReconModel],
              mu: float, stride: int | None = None) -> float:
    """Series-level training objective: MSE minus mu * summed diversity
    against earlier pool models."""
    stride = stride or max(1, model.segment_length // 2)
    xhat = reconstruct(model, ts, stride)
    loss = mse_loss(ts.values, xhat)
    for pj in prior:
        loss -= mu * diversity(model, pj, ts, stride)
    return loss


def batch_loss_and_grad(theta64: np.ndarray, sizes: list[int],
                        batch: np.ndarray, prior_recons: list[np.ndarray],
                        mu: float) -> tuple[float, np.ndarray]:
    """Batch-mean objective and its exact gradient.

    loss = mean((R - S)^2) - mu * sum_j mean((R - R_j)^2)
    over all batch entries, where R is this model's reconstruction of the
    batch S and R_j are frozen prior reconstructions.
    """
    out, cache = mlp_forward(theta64, sizes, batch, want_cache=True)
    count = batch.size
    diff = out - batch
    loss = float((diff**2).mean())
    d_out = 2.0 * diff / count
    for rj in prior_recons:
        dj = out - rj
        loss -= mu * float((dj**2).mean())
        d_out -= mu * 2.0 * dj / count
    grad = mlp_backward(theta64, sizes, cache, d_out)
    return loss, grad


def transfer_parameters(source: ReconModel, beta: float, seed: int,
                        model_id: str = "", trained_on: str = "") -> ReconModel:
    """Copy a random floor(beta * |theta|) subset of the source parameters
    into a fresh model and freeze them; the rest is freshly initialized."""
    if not 0 <= beta < 1:
        raise DataError("beta must be in [0, 1)")
    rng = np.random.default_rng(seed)
    theta = init_theta(source.sizes, rng)
    mask = np.zeros(len(theta), dtype=bool)
    k = int(np.floor(beta * len(theta)))
    if k > 0:
        idx = rng.choice(len(theta), size=k, replace=False)
        theta[idx] = source.theta[idx]
        mask[idx] = True
    return ReconModel(theta, list(source.sizes), mask, model_id, trained_on)


def average_parameters(models: list[ReconModel]) -> ReconModel:
    """Elementwise parameter mean across models with identical shapes."""
    thetas = np.stack([m.theta.astype(np.float64) for m in models])
    theta = thetas.mean(axis=0).astype(np.float32)
    return ReconModel(theta, list(models[0].sizes),
                      np.zeros(len(theta), dtype=bool))


def train(model: ReconModel, ts: TimeSeries, prior: list[ReconModel],
          cfg: TrainConfig) -> ReconModel:
    """Mini-batch gradient descent on the pool loss.

    Frozen positions are bit-identical before and after. Prior models are
    read-only; their batch reconstructions are computed once up front.
    """
    view = full_cover_view(ts, model.segment_length, cfg.stride)
    segs = view.segments
    theta = model.theta.astype(np.float64)
    frozen = model.frozen_mask
    prior64 = [p.theta.astype(np.float64) for p in prior]
    prior_all = [mlp_forward(pt, p.sizes, segs) for pt, p in zip(prior64, prior)]
    rng = np.random.default_rng(cfg.seed)
    n_seg = segs.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_seg)
        for lo in range(0, n_seg, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = segs[idx]
            recons = [r[idx] for r in prior_all]
            loss, grad = batch_loss_and_grad(theta, model.sizes, batch,
                                             recons, cfg.mu)
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            grad[frozen] = 0.0
            theta -= cfg.learning_rate * grad
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(epoch)
    new_theta = theta.astype(np.float32)
    new_theta[frozen] = model.theta[frozen]
    return ReconModel(new_theta, list(model.sizes), frozen.copy(),
                      model.model_id, model.trained_on)


# ---------------------------------------------------------------------------
# Binary persistence: JSON header + raw little-endian float32 theta
# + packed frozen-mask bits. Documented in the README.
# ---------------------------------------------------------------------------


def save_model(model: ReconModel, path) -> None:
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "sizes": model.sizes,
        "segment_length": model.segment_length,
        "model_id": model.model_id,
        "trained_on": model.trained_on,
        "n_params": len(model.theta),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(model.theta.astype("<f4").tobytes())
        fh.write(np.packbits(model.frozen_mask).tobytes())


def load_model(path) -> ReconModel:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IntegrityError(f"cannot read model file {path}: {exc}") from exc
    if raw[:4] != _MAGIC:
        raise IntegrityError(f"{path}: bad magic bytes")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    n = header["n_params"]
    off = 8 + hlen
    theta_bytes = raw[off : off + 4 * n]
    if len(theta_bytes) != 4 * n:
        raise IntegrityError(f"{path}: truncated parameter block")
    theta = np.frombuffer(theta_bytes, dtype="<f4").copy()
    mask_bytes = raw[off + 4 * n :]
    expect = (n + 7) // 8
    if len(mask_bytes) != expect:
        raise IntegrityError(f"{path}: truncated frozen-mask block")
    mask = np.unpackbits(np.frombuffer(mask_bytes, dtype=np.uint8))[:n].astype(bool)
    return ReconModel(theta, list(header["sizes"]), mask,
                      header["model_id"], header["trained_on"])
