"""LoRA adapters with rsLoRA scaling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import FactorPair, ShapeError, as_matrix


def rslora_scale(alpha: float, rank: int) -> float:
    return alpha / math.sqrt(rank)


@dataclass(frozen=True)
class LoraAdapter:
    """Factors ``b`` (m x r) and ``a`` (r x n); the update is ``scale * b @ a``.

    ``scale`` is derived from ``alpha`` and the rank on every access.
    """

    b: np.ndarray
    a: np.ndarray
    alpha: float

    def __post_init__(self):
        if self.b.shape[1] != self.a.shape[0]:
            raise ShapeError(f"adapter factors disagree: b{self.b.shape} a{self.a.shape}")

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def scale(self) -> float:
        return rslora_scale(self.alpha, self.rank)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.b.shape[0], self.a.shape[1])

    @classmethod
    def from_factors(cls, factors: FactorPair, alpha: float) -> "LoraAdapter":
        return cls(b=factors.b.copy(), a=factors.a.copy(), alpha=alpha)

    def factors(self) -> FactorPair:
        return FactorPair(b=self.b, a=self.a)

    def replace(self, b: np.ndarray, a: np.ndarray) -> "LoraAdapter":
        return LoraAdapter(b=b, a=a, alpha=self.alpha)


@dataclass(frozen=True)
class LayerState:
    backbone: np.ndarray
    adapter: LoraAdapter | None = None

    def __post_init__(self):
        if self.adapter is not None and self.adapter.shape != self.backbone.shape:
            raise ShapeError(
                f"adapter shape {self.adapter.shape} does not match backbone {self.backbone.shape}"
            )


def kaiming_uniform(rows: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(rows, fan_in))


def init_kaiming_zero(m: int, n: int, r: int, alpha: float, rng: np.random.Generator) -> LoraAdapter:
    """Standard LoRA start: ``b = 0`` and Kaiming-uniform ``a`` with fan-in ``n``."""
    if r < 1 or r > min(m, n):
        raise ShapeError(f"rank {r} out of range for a {m}x{n} layer")
    return LoraAdapter(b=np.zeros((m, r)), a=kaiming_uniform(r, n, rng), alpha=alpha)


def delta(adapter: LoraAdapter) -> np.ndarray:
    """Unscaled product ``b @ a``."""
    return adapter.b @ adapter.a


def effective_weight(layer: LayerState) -> np.ndarray:
    w = as_matrix(layer.backbone, "backbone")
    if layer.adapter is None:
        return w
    return w + layer.adapter.scale * delta(layer.adapter)


def merge_update(backbone: np.ndarray, factors: FactorPair, scale: float) -> np.ndarray:
    """``backbone + scale * b @ a``; shared by client and server merges."""
    if factors.shape != backbone.shape:
        raise ShapeError(f"update shape {factors.shape} does not match backbone {backbone.shape}")
    return backbone + scale * (factors.b @ factors.a)
