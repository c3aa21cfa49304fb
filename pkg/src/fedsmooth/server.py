"""Server-side aggregation and backbone merging."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import FactorPair, ShapeError, frobenius_norm, svd_approx
from .lora import merge_update


@dataclass
class ServerState:
    backbone: list[np.ndarray]
    factors: list[FactorPair | None]
    scale: float
    total_rounds: int
    round: int = 0
    # rank-r projection loss of the last aggregation, per layer
    eps_server: list[float | None] = field(default_factory=list)

    def global_weights(self, merged: bool = True) -> list[np.ndarray]:
        """Weights of the global model. Merging methods have already folded
        the factors into the backbone; otherwise the adapter is added here."""
        if merged:
            return list(self.backbone)
        return [w if f is None else merge_update(w, f, self.scale) for w, f in zip(self.backbone, self.factors)]


def _canonical(updates, sizes, client_ids):
    if not updates:
        raise ValueError("no client updates to aggregate")
    if len(sizes) != len(updates):
        raise ValueError(f"{len(updates)} updates but {len(sizes)} sizes")
    if any(n <= 0 for n in sizes):
        raise ValueError("client sizes must be positive")
    ids = list(range(len(updates)) if client_ids is None else client_ids)
    order = sorted(range(len(updates)), key=lambda k: ids[k])
    total = float(sum(sizes))
    return [updates[k] for k in order], [sizes[k] / total for k in order]


def aggregate_full_rank(
    updates: Sequence[list[FactorPair | None]],
    sizes: Sequence[int],
    client_ids: Sequence[int] | None = None,
) -> list[np.ndarray | None]:
    """Size-weighted mean of the client products ``B_c @ A_c`` per layer.

    Clients are summed in ascending id order so the result does not depend on
    arrival order.
    """
    ordered, weights = _canonical(updates, sizes, client_ids)
    out = []
    for layer in range(len(ordered[0])):
        if ordered[0][layer] is None:
            out.append(None)
            continue
        total = weights[0] * ordered[0][layer].product()
        for w, upd in zip(weights[1:], ordered[1:]):
            total = total + w * upd[layer].product()
        out.append(total)
    return out


def aggregate_factor_average(
    updates: Sequence[list[FactorPair | None]],
    sizes: Sequence[int],
    client_ids: Sequence[int] | None = None,
) -> list[FactorPair | None]:
    """Size-weighted mean of ``B`` and ``A`` separately (FedAvg on factors)."""
    ordered, weights = _canonical(updates, sizes, client_ids)
    out = []
    for layer in range(len(ordered[0])):
        if ordered[0][layer] is None:
            out.append(None)
            continue
        ranks = {upd[layer].rank for upd in ordered}
        if len(ranks) != 1:
            raise ShapeError(f"layer {layer}: clients disagree on rank {sorted(ranks)}")
        b = weights[0] * ordered[0][layer].b
        a = weights[0] * ordered[0][layer].a
        for w, upd in zip(weights[1:], ordered[1:]):
            b = b + w * upd[layer].b
            a = a + w * upd[layer].a
        out.append(FactorPair(b=b, a=a))
    return out


def project_rank_r(
    deltas: Sequence[np.ndarray | None], r: int, mode: str = "exact", rng=None
) -> tuple[list[FactorPair | None], list[float | None]]:
    """SVDApprox of each aggregated update, with its Frobenius projection loss."""
    factors, losses = [], []
    for d in deltas:
        if d is None:
            factors.append(None)
            losses.append(None)
            continue
        f = svd_approx(d, r, mode, rng=rng)
        factors.append(f)
        losses.append(frobenius_norm(d - f.product()))
    return factors, losses


def merge_backbone(state: ServerState, factors: list[FactorPair | None], merge: bool = True) -> ServerState:
    """Fold ``scale * B @ A`` into the backbone (when ``merge``), store the
    factors as the next broadcast and advance the round."""
    if len(factors) != len(state.backbone):
        raise ShapeError(f"{len(factors)} factor layers for {len(state.backbone)} backbone layers")
    if merge:
        state.backbone = [w if f is None else merge_update(w, f, state.scale) for w, f in zip(state.backbone, factors)]
    state.factors = list(factors)
    state.round += 1
    return state
