"""Softmax regression / one-hidden-layer tanh MLP on flat parameter vectors.

Parameters live in one float64 vector so the server can average them
directly. Layout (row-major): ``W (F x C), b (C)`` for softmax regression,
``W1 (F x H), b1 (H), W2 (H x C), b2 (C)`` for the MLP.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .partition import LabeledDataset

INIT_SCALE = 0.05


@dataclass(frozen=True)
class ModelShape:
    num_features: int
    num_classes: int
    hidden: int = 0

    @property
    def size(self) -> int:
        F, H, C = self.num_features, self.hidden, self.num_classes
        if H == 0:
            return F * C + C
        return F * H + H + H * C + C

    def as_dict(self) -> dict:
        return {"num_features": self.num_features, "hidden": self.hidden, "num_classes": self.num_classes}


@dataclass(frozen=True)
class ModelParams:
    values: np.ndarray
    shape: ModelShape

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.shape.size:
            raise ValueError(f"expected {self.shape.size} parameters for {self.shape}, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "values", values)

    def to_bytes(self) -> bytes:
        """Length-prefixed JSON shape header followed by little-endian float64 values."""
        header = json.dumps({"shape": self.shape.as_dict(), "dtype": "<f8"}, sort_keys=True).encode("utf-8")
        return struct.pack("<I", len(header)) + header + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        (n,) = struct.unpack_from("<I", blob, 0)
        header = json.loads(blob[4:4 + n].decode("utf-8"))
        shape = ModelShape(**header["shape"])
        values = np.frombuffer(blob[4 + n:], dtype="<f8").astype(np.float64)
        return cls(values, shape)


@dataclass(frozen=True)
class TrainerConfig:
    """Local SGD settings.

    Give either ``tau`` (fixed steps per round) or ``epochs``; with epochs a
    client holding ``n`` samples runs ``epochs * ceil(n / batch_size)`` steps.
    """

    eta: float = 0.01
    tau: int | None = None
    epochs: int | None = 1
    batch_size: int = 64
    prox_mu: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")
        if self.tau is None and self.epochs is None:
            raise ValueError("set tau or epochs")
        if self.tau is not None and self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")

    def steps_for(self, num_samples: int) -> int:
        if self.tau is not None:
            return int(self.tau)
        return int(self.epochs) * math.ceil(num_samples / self.batch_size)


def init_params(shape: ModelShape, seed: int) -> ModelParams:
    """Weights uniform in [-0.05, 0.05], biases zero."""
    rng = np.random.default_rng(seed)
    F, H, C = shape.num_features, shape.hidden, shape.num_classes
    if H == 0:
        parts = [rng.uniform(-INIT_SCALE, INIT_SCALE, F * C), np.zeros(C)]
    else:
        parts = [
            rng.uniform(-INIT_SCALE, INIT_SCALE, F * H),
            np.zeros(H),
            rng.uniform(-INIT_SCALE, INIT_SCALE, H * C),
            np.zeros(C),
        ]
    return ModelParams(np.concatenate(parts), shape)


def zeros(shape: ModelShape) -> ModelParams:
    return ModelParams(np.zeros(shape.size), shape)


def _unpack(values: np.ndarray, shape: ModelShape):
    F, H, C = shape.num_features, shape.hidden, shape.num_classes
    if H == 0:
        return values[: F * C].reshape(F, C), values[F * C:]
    o = 0
    W1 = values[o:o + F * H].reshape(F, H); o += F * H
    b1 = values[o:o + H]; o += H
    W2 = values[o:o + H * C].reshape(H, C); o += H * C
    return W1, b1, W2, values[o:]


def _check_batch(params: ModelParams, batch: LabeledDataset) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.num_features != params.shape.num_features:
        raise ValueError(
            f"feature dimension mismatch: model expects {params.shape.num_features}, batch has {batch.num_features}"
        )
    if batch.labels.max() >= params.shape.num_classes:
        raise ValueError("batch has labels outside the model's classes")


def _forward(values: np.ndarray, shape: ModelShape, X: np.ndarray):
    parts = _unpack(values, shape)
    if shape.hidden == 0:
        W, b = parts
        return X @ W + b, None
    W1, b1, W2, b2 = parts
    hidden = np.tanh(X @ W1 + b1)
    return hidden @ W2 + b2, hidden


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits(params: ModelParams, X) -> np.ndarray:
    return _forward(params.values, params.shape, np.asarray(X, dtype=np.float64))[0]


def predict(params: ModelParams, X) -> np.ndarray:
    return np.argmax(logits(params, X), axis=1)


def accuracy(params: ModelParams, data: LabeledDataset) -> float:
    return float(np.mean(predict(params, data.features) == data.labels))


def loss(params: ModelParams, batch: LabeledDataset) -> float:
    """Mean softmax cross-entropy over the batch."""
    _check_batch(params, batch)
    z, _ = _forward(params.values, params.shape, batch.features)
    logp = _log_softmax(z)
    return float(-logp[np.arange(len(batch)), batch.labels].mean())


def gradient(
    params: ModelParams,
    batch: LabeledDataset,
    anchor: ModelParams | None = None,
    prox_mu: float = 0.0,
) -> np.ndarray:
    """Gradient of ``loss + prox_mu / 2 * ||params - anchor||^2``."""
    _check_batch(params, batch)
    if prox_mu > 0 and anchor is None:
        raise ValueError("prox_mu > 0 requires an anchor model")
    shape = params.shape
    X, y = batch.features, batch.labels
    m = len(batch)
    z, hidden = _forward(params.values, shape, X)
    dz = np.exp(_log_softmax(z))
    dz[np.arange(m), y] -= 1.0
    dz /= m

    if shape.hidden == 0:
        grad = np.concatenate([(X.T @ dz).ravel(), dz.sum(axis=0)])
    else:
        _, _, W2, _ = _unpack(params.values, shape)
        dh = (dz @ W2.T) * (1.0 - hidden ** 2)
        grad = np.concatenate([(X.T @ dh).ravel(), dh.sum(axis=0), (hidden.T @ dz).ravel(), dz.sum(axis=0)])

    if prox_mu > 0:
        grad += prox_mu * (params.values - anchor.values)
    return grad


def local_train(
    init: ModelParams,
    data: LabeledDataset,
    cfg: TrainerConfig,
    debug: bool = False,
) -> ModelParams:
    """Run ``cfg.steps_for(len(data))`` mini-batch SGD steps from ``init``.

    Batches come from a seeded permutation, reshuffled whenever it is
    exhausted; a short final batch is kept. With ``prox_mu > 0`` the proximal
    anchor is ``init`` (FedProx).
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    steps = cfg.steps_for(len(data))
    rng = np.random.default_rng(cfg.seed)
    anchor = init if cfg.prox_mu > 0 else None
    n = len(data)
    w = init.values.copy()
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos >= n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        batch = LabeledDataset(data.features[idx], data.labels[idx], data.num_classes)
        current = ModelParams(w, init.shape)
        if debug:
            value = loss(current, batch)
            assert math.isfinite(value) and value >= 0, f"bad loss {value}"
        w = w - cfg.eta * gradient(current, batch, anchor, cfg.prox_mu)
    return ModelParams(w, init.shape)


def per_class_accuracy(params: ModelParams, data: LabeledDataset) -> np.ndarray:
    """Accuracy restricted to each class; NaN for classes absent from ``data``."""
    pred = predict(params, data.features)
    out = np.full(data.num_classes, np.nan)
    for c in range(data.num_classes):
        mask = data.labels == c
        if mask.any():
            out[c] = float(np.mean(pred[mask] == c))
    return out
