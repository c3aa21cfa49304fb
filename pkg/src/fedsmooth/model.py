"""Small classifiers with hand-written backpropagation.

Weights follow the ``(out, in)`` convention: logits are ``X @ W.T``. Neither
model has biases. ``mlp2`` is ``softmax(relu(X W1^T) W2^T)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import ShapeError
from .lora import LayerState, LoraAdapter, effective_weight

PROB_FLOOR = 1e-12
MODEL_KINDS = ("softmax_regression", "mlp2")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "softmax_regression"
    input_dim: int = 16
    num_classes: int = 8
    hidden_dim: int | None = None
    # indices of layers carrying adapters; None means every layer
    adapted_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim must be positive and num_classes >= 2")
        if self.kind == "mlp2" and (self.hidden_dim is None or self.hidden_dim < 1):
            raise ValueError("mlp2 needs a positive hidden_dim")
        if self.adapted_layers is not None:
            bad = [i for i in self.adapted_layers if not 0 <= i < self.num_layers]
            if bad:
                raise ValueError(f"adapted layer indices out of range: {bad}")

    @property
    def num_layers(self) -> int:
        return 1 if self.kind == "softmax_regression" else 2

    def layer_shapes(self) -> list[tuple[int, int]]:
        if self.kind == "softmax_regression":
            return [(self.num_classes, self.input_dim)]
        return [(self.hidden_dim, self.input_dim), (self.num_classes, self.hidden_dim)]

    def adapted(self) -> tuple[int, ...]:
        if self.adapted_layers is None:
            return tuple(range(self.num_layers))
        return tuple(sorted(self.adapted_layers))


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ShapeError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    steps_per_round: int = 50
    batch_size: int = 64
    lr_initial: float = 0.01
    lr_schedule: str = "cosine"
    seed: int | None = None

    def __post_init__(self):
        if self.steps_per_round < 0:
            raise ValueError("steps_per_round must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr_initial < 0:
            raise ValueError("lr_initial must be non-negative")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "constant" or total_steps <= 0:
        return cfg.lr_initial
    return cfg.lr_initial * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _weight(w) -> np.ndarray:
    return effective_weight(w) if isinstance(w, LayerState) else np.asarray(w, dtype=np.float64)


def _check_shapes(spec: ModelSpec, mats: Sequence[np.ndarray], batch: Batch):
    shapes = spec.layer_shapes()
    if len(mats) != len(shapes):
        raise ShapeError(f"expected {len(shapes)} layers, got {len(mats)}")
    for i, (w, shp) in enumerate(zip(mats, shapes)):
        if w.shape != shp:
            raise ShapeError(f"layer {i} has shape {w.shape}, expected {shp}")
    if batch.features.shape[1] != spec.input_dim:
        raise ShapeError(
            f"features have {batch.features.shape[1]} columns, model expects {spec.input_dim}"
        )
    if len(batch) and (batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes):
        raise ShapeError("labels out of range for the model's class count")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cache(spec: ModelSpec, mats, x):
    if spec.kind == "softmax_regression":
        return softmax(x @ mats[0].T), [x]
    pre = x @ mats[0].T
    hidden = np.maximum(pre, 0.0)
    return softmax(hidden @ mats[1].T), [x, hidden, pre]


def forward(spec: ModelSpec, weights, batch: Batch) -> np.ndarray:
    """Class probabilities, one row per sample."""
    mats = [_weight(w) for w in weights]
    _check_shapes(spec, mats, batch)
    return _forward_cache(spec, mats, batch.features)[0]


def loss(probs: np.ndarray, labels) -> float:
    """Mean cross-entropy of the true-class probabilities."""
    labels = np.asarray(labels)
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def _backprop(spec: ModelSpec, mats, batch: Batch) -> tuple[float, list[np.ndarray]]:
    x = batch.features
    probs, cache = _forward_cache(spec, mats, x)
    n = len(batch)
    d_logits = probs.copy()
    d_logits[np.arange(n), batch.labels] -= 1.0
    d_logits /= n
    value = loss(probs, batch.labels)
    if spec.kind == "softmax_regression":
        return value, [d_logits.T @ x]
    _, hidden, pre = cache
    g2 = d_logits.T @ hidden
    d_pre = (d_logits @ mats[1]) * (pre > 0.0)
    g1 = d_pre.T @ x
    return value, [g1, g2]


def loss_and_grads(spec: ModelSpec, weights, batch: Batch) -> tuple[float, list[np.ndarray]]:
    mats = [_weight(w) for w in weights]
    _check_shapes(spec, mats, batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    return _backprop(spec, mats, batch)


def grad_full_weight(spec: ModelSpec, weights, batch: Batch, layer_index: int) -> np.ndarray:
    """Batch-mean gradient of the loss w.r.t. the effective weight of one layer."""
    if not 0 <= layer_index < spec.num_layers:
        raise IndexError(f"layer index {layer_index} out of range")
    return loss_and_grads(spec, weights, batch)[1][layer_index]


def _factor_grads(g: np.ndarray, adapter: LoraAdapter) -> tuple[np.ndarray, np.ndarray]:
    s = adapter.scale
    return s * (g @ adapter.a.T), s * (adapter.b.T @ g)


def grad_lora_factors(spec: ModelSpec, weights, batch: Batch, layer_index: int):
    """``(dL/dB, dL/dA)`` for the adapter on ``weights[layer_index]``."""
    layer = weights[layer_index]
    if not isinstance(layer, LayerState) or layer.adapter is None:
        raise ValueError(f"layer {layer_index} carries no adapter")
    g = grad_full_weight(spec, weights, batch, layer_index)
    return _factor_grads(g, layer.adapter)


def minibatch_indices(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Shuffled epochs with wraparound: yields ``steps`` index arrays."""
    if n == 0:
        raise ValueError("empty dataset")
    size = min(batch_size, n)
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + size <= n:
            idx = perm[pos:pos + size]
            pos += size
        else:
            head = perm[pos:]
            perm = rng.permutation(n)
            pos = size - head.shape[0]
            idx = np.concatenate([head, perm[:pos]])
        yield idx


@dataclass
class TrainResult:
    adapters: list[LoraAdapter | None]
    losses: list[float] = field(default_factory=list)


def train_local(
    spec: ModelSpec,
    backbone_weights: Sequence[np.ndarray],
    adapters: Sequence[LoraAdapter | None],
    dataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
    step_offset: int = 0,
    total_steps: int | None = None,
) -> TrainResult:
    """Plain SGD on the adapter factors; backbones stay frozen.

    The learning-rate schedule is indexed by ``step_offset + i`` over
    ``total_steps`` so one cosine curve can span several rounds. Each
    recorded loss is the minibatch loss before that step's update.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if total_steps is None:
        total_steps = cfg.steps_per_round
    backbones = [np.asarray(w, dtype=np.float64) for w in backbone_weights]
    current = list(adapters)
    losses: list[float] = []
    for i, idx in enumerate(minibatch_indices(len(dataset), cfg.batch_size, cfg.steps_per_round, rng)):
        batch = Batch(dataset.features[idx], dataset.labels[idx])
        layers = [LayerState(w, ad) for w, ad in zip(backbones, current)]
        value, grads = loss_and_grads(spec, layers, batch)
        losses.append(value)
        lr = learning_rate(cfg, step_offset + i, total_steps)
        for j, ad in enumerate(current):
            if ad is None:
                continue
            gb, ga = _factor_grads(grads[j], ad)
            current[j] = ad.replace(ad.b - lr * gb, ad.a - lr * ga)
    return TrainResult(adapters=current, losses=losses)
