"""Client-side local updates.

``local_update`` is the FedSmoothLoRA client: merge the broadcast server
update into the local backbone, build the Round-Matching and Gradient-Aligned
matrices, initialise LoRA from their combination, train, and upload a rank-r
projection of the effective update. ``local_update_fedavg`` and
``local_update_frlora`` are the baseline clients.

Per-layer quantities are lists aligned with ``ModelSpec.layer_shapes()``;
entries for layers without an adapter are ``None``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, Stream, make_rng
from .data import LabeledDataset
from .linalg import FactorPair, ShapeError, frobenius_norm, svd_approx, svd_exact, svd_randomized
from .lora import LoraAdapter, kaiming_uniform, merge_update
from .model import Batch, ModelSpec, loss_and_grads, train_local

ZETA_FLOOR = 0.6

# canonical order of the FedSmoothLoRA local pipeline
PIPELINE_STEPS = (
    "merge_server_update",
    "round_matching",
    "calibration_batch",
    "gradient",
    "reconstruct_gradient_aligned",
    "zeta",
    "init_matrix",
    "init_factors",
    "train",
    "upload_projection",
)

LayerFactors = list  # list[FactorPair | None]
LayerMatrices = list  # list[np.ndarray | None]


@dataclass
class ClientState:
    client_id: int
    backbone: list[np.ndarray]
    dataset: LabeledDataset
    val_dataset: LabeledDataset | None = None
    prev_factors: LayerFactors | None = None
    last_active_round: int | None = None
    # server updates broadcast while this client sat out, oldest first
    pending: list[LayerFactors] = field(default_factory=list)
    last_loss: float | None = None

    @property
    def size(self) -> int:
        return len(self.dataset)


@dataclass
class ClientRoundContext:
    round: int
    client_id: int
    zeta: float
    ga_rank: int
    backbone: LayerMatrices
    server_product_sum: LayerMatrices
    prev_product: LayerMatrices | None
    w_rm: LayerMatrices
    w_ga: LayerMatrices
    w_ga_hat: LayerMatrices
    w_init: LayerMatrices
    init_factors: LayerFactors
    trained_factors: LayerFactors
    uploaded: LayerFactors
    eps_init: LayerMatrices
    eps_end: LayerMatrices
    eps_init_norm: list[float | None]
    eps_end_norm: list[float | None]
    events: list[str] = field(default_factory=list)


@dataclass
class ClientUpdate:
    client_id: int
    uploaded: LayerFactors
    losses: list[float]
    context: ClientRoundContext | None = None


def _zeros_like_layers(spec: ModelSpec) -> LayerMatrices:
    adapted = set(spec.adapted())
    return [np.zeros(shp) if i in adapted else None for i, shp in enumerate(spec.layer_shapes())]


def merge_server_update(state: ClientState, server_factors: LayerFactors, scale: float) -> ClientState:
    """Add ``scale * B_s A_s`` to every adapted layer of the local backbone."""
    if len(server_factors) != len(state.backbone):
        raise ShapeError(f"{len(server_factors)} server layers for {len(state.backbone)} backbone layers")
    state.backbone = [
        w if f is None else merge_update(w, f, scale) for w, f in zip(state.backbone, server_factors)
    ]
    return state


def _sum_products(updates: list[LayerFactors], layer: int) -> np.ndarray:
    total = updates[0][layer].product()
    for upd in updates[1:]:
        total = total + upd[layer].product()
    return total


def build_round_matching(state: ClientState, server_factors: LayerFactors, t: int | None = None) -> LayerMatrices:
    """``B_c A_c (previous round) - B_s A_s (current broadcast)``; zero at
    ``t == 0`` or before the client has ever uploaded."""
    if t == 0 or state.prev_factors is None:
        return [None if f is None else np.zeros(f.shape) for f in server_factors]
    return [
        None if f is None else prev.product() - f.product()
        for prev, f in zip(state.prev_factors, server_factors)
    ]


def build_round_matching_partial(state: ClientState, pending: list[LayerFactors]) -> LayerMatrices:
    """Round-Matching for a client rejoining after inactivity.

    ``pending`` holds every server broadcast since the client's last active
    round, including the current one. Their products are summed in order and
    subtracted from the client's retained product.
    """
    if state.prev_factors is None:
        raise ValueError(f"client {state.client_id} has no retained factors")
    out: LayerMatrices = []
    for i, prev in enumerate(state.prev_factors):
        if prev is None:
            out.append(None)
        elif not pending:
            out.append(prev.product())
        else:
            out.append(prev.product() - _sum_products(pending, i))
    return out


def sample_calibration_batch(dataset: LabeledDataset, size: int, rng: np.random.Generator) -> Batch:
    if len(dataset) == 0:
        raise ValueError("cannot draw a calibration batch from an empty dataset")
    if len(dataset) >= size:
        idx = np.sort(rng.choice(len(dataset), size=size, replace=False))
    else:
        idx = np.arange(len(dataset))
    return Batch(dataset.features[idx], dataset.labels[idx])


def build_gradient_aligned(state: ClientState, calib_batch: Batch, spec: ModelSpec) -> LayerMatrices:
    """Full-weight loss gradients at the bare local backbone, adapted layers only."""
    if len(calib_batch) == 0:
        raise ValueError("empty calibration batch")
    _, grads = loss_and_grads(spec, state.backbone, calib_batch)
    adapted = set(spec.adapted())
    return [g if i in adapted else None for i, g in enumerate(grads)]


def reconstruct_gradient_aligned(
    w_ga: np.ndarray,
    r: int,
    gamma: float,
    mode: str = "exact",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """``sqrt(d_out) / gamma**2 * U[:, r:2r] @ V[:, :r].T`` from the SVD of the
    gradient, where ``d_out`` is its row count."""
    m, n = w_ga.shape
    if r < 1:
        raise ShapeError(f"rank must be >= 1, got {r}")
    if 2 * r > min(m, n):
        raise ShapeError(
            f"gradient of shape {(m, n)} supports rank at most {min(m, n) // 2}; got {r}"
        )
    if mode == "exact":
        res = svd_exact(w_ga)
    else:
        res = svd_randomized(w_ga, 2 * r, rng=rng)
    return (math.sqrt(m) / gamma**2) * (res.u[:, r:2 * r] @ res.v[:, :r].T)


def zeta_value(t: int, t_total: int, mode: str) -> float:
    if mode == "constant":
        return 1.0
    if mode != "decay":
        raise ValueError(f"unknown zeta mode {mode!r}")
    if t_total <= 1:
        return 1.0
    return ZETA_FLOOR + (1.0 - ZETA_FLOOR) * 0.5 * (1.0 + math.cos(math.pi * t / (t_total - 1)))


def fresh_factors(cfg: RunConfig, t: int) -> LayerFactors:
    """Zero ``B`` and Kaiming-uniform ``A``, shared by all clients in round ``t``."""
    adapted = set(cfg.model.adapted())
    out: LayerFactors = []
    for i, (m, n) in enumerate(cfg.model.layer_shapes()):
        if i not in adapted:
            out.append(None)
            continue
        rng = make_rng(cfg.seed, Stream.LORA_INIT, t, i)
        out.append(FactorPair(b=np.zeros((m, cfg.rank)), a=kaiming_uniform(cfg.rank, n, rng)))
    return out


def _catch_up(state: ClientState, server_factors: LayerFactors, t: int, scale: float) -> list[LayerFactors]:
    """Merge every outstanding broadcast into the backbone; returns them in order."""
    updates = state.pending + [server_factors]
    if t > 0:
        for upd in updates:
            merge_server_update(state, upd, scale)
    return updates


def _finish(state: ClientState, uploaded: LayerFactors, t: int, losses: list[float]) -> None:
    state.prev_factors = uploaded
    state.last_active_round = t
    state.pending = []
    if losses:
        state.last_loss = losses[-1]


def _adapters(factors: LayerFactors, alpha: float) -> list[LoraAdapter | None]:
    return [None if f is None else LoraAdapter.from_factors(f, alpha) for f in factors]


def _train(state, backbones, factors, t, cfg):
    rng = make_rng(cfg.train.seed, Stream.TRAIN, state.client_id, t)
    steps = cfg.train.steps_per_round
    result = train_local(
        cfg.model, backbones, _adapters(factors, cfg.alpha), state.dataset, cfg.train, rng,
        step_offset=t * steps, total_steps=cfg.rounds * steps,
    )
    trained = [None if ad is None else FactorPair(ad.b, ad.a) for ad in result.adapters]
    return trained, result.losses


def local_update(state: ClientState, server_factors: LayerFactors, t: int, cfg: RunConfig) -> ClientUpdate:
    """One FedSmoothLoRA client round. Mutates ``state``."""
    spec = cfg.model
    s = cfg.scale
    r = cfg.rank
    use_rm = cfg.method != "fedsmooth_no_rm"
    use_ga = cfg.method != "fedsmooth_no_ga"
    svd_rng = make_rng(cfg.seed, Stream.SVD, state.client_id, t)
    events: list[str] = []

    updates = _catch_up(state, server_factors, t, s)
    if t > 0:
        events.append("merge_server_update")
    backbone = list(state.backbone)
    server_sum = [None if f is None else _sum_products(updates, i) for i, f in enumerate(server_factors)]

    had_prev = t > 0 and state.prev_factors is not None
    prev_product = [None if f is None else f.product() for f in state.prev_factors] if had_prev else None
    if had_prev and use_rm:
        w_rm = build_round_matching_partial(state, updates)
    else:
        w_rm = _zeros_like_layers(spec)
    events.append("round_matching")

    calib = sample_calibration_batch(
        state.dataset, cfg.calib_batch_size, make_rng(cfg.seed, Stream.CALIBRATION, state.client_id, t)
    )
    events.append("calibration_batch")
    w_ga = build_gradient_aligned(state, calib, spec)
    events.append("gradient")

    ga_rank = 0
    w_ga_hat: LayerMatrices = []
    for g in w_ga:
        if g is None:
            w_ga_hat.append(None)
            continue
        ga_rank = min(r, min(g.shape) // 2)
        if use_ga and ga_rank >= 1:
            w_ga_hat.append(reconstruct_gradient_aligned(g, ga_rank, cfg.gamma, cfg.svd_mode, svd_rng))
        else:
            w_ga_hat.append(np.zeros(g.shape))
    events.append("reconstruct_gradient_aligned")

    zeta = zeta_value(t, cfg.rounds, cfg.resolved_zeta_mode)
    events.append("zeta")
    w_init = [None if h is None else h + zeta * rm for h, rm in zip(w_ga_hat, w_rm)]
    events.append("init_matrix")

    fallback = fresh_factors(cfg, t)
    init_factors: LayerFactors = []
    for i, wi in enumerate(w_init):
        if wi is None:
            init_factors.append(None)
        elif not np.any(wi):
            # an all-zero init matrix would give B = A = 0, a stationary point
            init_factors.append(fallback[i])
        else:
            init_factors.append(svd_approx(wi, r, cfg.svd_mode, rng=svd_rng))
    events.append("init_factors")

    train_backbone = [w if h is None else w - s * h for w, h in zip(backbone, w_ga_hat)]
    trained, losses = _train(state, train_backbone, init_factors, t, cfg)
    events.append("train")

    uploaded: LayerFactors = []
    eps_init: LayerMatrices = []
    eps_end: LayerMatrices = []
    for i, tf in enumerate(trained):
        if tf is None:
            uploaded.append(None)
            eps_init.append(None)
            eps_end.append(None)
            continue
        target = tf.product() - w_ga_hat[i]
        up = svd_approx(target, r, cfg.svd_mode, rng=svd_rng)
        uploaded.append(up)
        eps_init.append(init_factors[i].product() - w_init[i])
        eps_end.append(up.product() - target)
    events.append("upload_projection")

    ctx = ClientRoundContext(
        round=t,
        client_id=state.client_id,
        zeta=zeta,
        ga_rank=ga_rank,
        backbone=backbone,
        server_product_sum=server_sum,
        prev_product=prev_product,
        w_rm=w_rm,
        w_ga=w_ga,
        w_ga_hat=w_ga_hat,
        w_init=w_init,
        init_factors=init_factors,
        trained_factors=trained,
        uploaded=uploaded,
        eps_init=eps_init,
        eps_end=eps_end,
        eps_init_norm=[None if e is None else frobenius_norm(e) for e in eps_init],
        eps_end_norm=[None if e is None else frobenius_norm(e) for e in eps_end],
        events=events,
    )
    _finish(state, uploaded, t, losses)
    return ClientUpdate(state.client_id, uploaded, losses, ctx)


def local_update_fedavg(state: ClientState, server_factors: LayerFactors, t: int, cfg: RunConfig) -> ClientUpdate:
    """FedAvgLoRA client: start from the broadcast factors on the frozen
    pretrained backbone and upload the trained factors as they are."""
    start = [None if f is None else FactorPair(f.b.copy(), f.a.copy()) for f in server_factors]
    trained, losses = _train(state, state.backbone, start, t, cfg)
    _finish(state, trained, t, losses)
    return ClientUpdate(state.client_id, trained, losses)


def frlora_init(state: ClientState, cfg: RunConfig, t: int, init_mode: str = "fresh") -> LayerFactors:
    """Round-start factors of the merge-and-reset baseline.

    ``fresh`` is zero ``B`` / Kaiming ``A``; ``weight_svd`` is the rank-r
    SVDApprox of the (merged) local backbone.
    """
    if init_mode == "fresh":
        return fresh_factors(cfg, t)
    if init_mode != "weight_svd":
        raise ValueError(f"unknown init mode {init_mode!r}")
    svd_rng = make_rng(cfg.seed, Stream.SVD, state.client_id, t)
    adapted = set(cfg.model.adapted())
    return [svd_approx(w, cfg.rank, cfg.svd_mode, rng=svd_rng) if i in adapted else None
            for i, w in enumerate(state.backbone)]


def local_update_frlora(
    state: ClientState, server_factors: LayerFactors, t: int, cfg: RunConfig, init_mode: str = "fresh"
) -> ClientUpdate:
    """Merge-and-reset baseline.

    ``fresh`` restarts from zero ``B`` / Kaiming ``A`` each round and uploads
    the raw trained factors. ``weight_svd`` starts from the rank-r SVD of the
    merged backbone, trains against the residual backbone ``W - s B0 A0`` and
    uploads the rank-r projection of ``B A - B0 A0``.
    """
    s = cfg.scale
    if init_mode not in ("fresh", "weight_svd"):
        raise ValueError(f"unknown init mode {init_mode!r}")
    _catch_up(state, server_factors, t, s)
    init = frlora_init(state, cfg, t, init_mode)
    if init_mode == "fresh":
        trained, losses = _train(state, state.backbone, init, t, cfg)
        uploaded = trained
    else:
        train_backbone = [w if f is None else w - s * f.product() for w, f in zip(state.backbone, init)]
        trained, losses = _train(state, train_backbone, init, t, cfg)
        svd_rng = make_rng(cfg.seed, Stream.SVD, state.client_id, t, 1)
        uploaded = [
            None if tf is None else svd_approx(tf.product() - f0.product(), cfg.rank, cfg.svd_mode, rng=svd_rng)
            for tf, f0 in zip(trained, init)
        ]
    _finish(state, uploaded, t, losses)
    return ClientUpdate(state.client_id, uploaded, losses)
