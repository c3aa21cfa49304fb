"""Round loop, evaluation, inter-round discrepancy verification and run outputs."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import storage
from .client import (
    ClientRoundContext,
    ClientState,
    ClientUpdate,
    fresh_factors,
    local_update,
    local_update_fedavg,
    local_update_frlora,
)
from .config import FEDSMOOTH_FAMILY, RunConfig, Stream, make_rng
from .data import (
    LabeledDataset,
    generate_synthetic,
    load_csv,
    partition_dirichlet,
    partition_iid,
    split_train_val,
    standardize,
)
from .linalg import frobenius_norm
from .model import Batch, forward
from .server import (
    ServerState,
    aggregate_factor_average,
    aggregate_full_rank,
    merge_backbone,
    project_rank_r,
)

log = logging.getLogger(__name__)

VERIFY_MAX_DIM = 64
SERVER_SVD_STREAM = 11


@dataclass
class RoundMetrics:
    round: int
    participants: list[int] = field(default_factory=list)
    losses: dict[int, list[float]] = field(default_factory=dict)
    eval_acc: float | None = None
    zeta: float | None = None
    eps_init: dict[int, list[float | None]] = field(default_factory=dict)
    eps_end: dict[int, list[float | None]] = field(default_factory=dict)
    eps_server: list[float | None] = field(default_factory=list)
    jumps: dict[int, float | None] = field(default_factory=dict)
    wall_time: float = 0.0


@dataclass
class DiscrepancyRow:
    round: int
    client_id: int
    layer: int
    lhs_norm: float
    rhs_norm: float
    residual: float
    bound_slack: float


@dataclass
class DiscrepancyReport:
    rows: list[DiscrepancyRow]

    @property
    def max_residual(self) -> float:
        return max((r.residual for r in self.rows), default=0.0)

    @property
    def min_slack(self) -> float:
        return min((r.bound_slack for r in self.rows), default=0.0)

    @property
    def max_gap(self) -> float:
        return max((r.lhs_norm for r in self.rows), default=0.0)

    def holds(self, tol: float = 1e-8, slack_tol: float = 1e-9) -> bool:
        return self.max_residual < tol and self.min_slack >= -slack_tol


@dataclass
class Experiment:
    cfg: RunConfig
    server: ServerState
    clients: list[ClientState]
    test_set: LabeledDataset
    data_fingerprint: str
    record_trace: bool = False
    trace: list[ClientRoundContext] = field(default_factory=list)

    @property
    def merges(self) -> bool:
        return self.cfg.method != "fedavg_lora"

    def global_weights(self) -> list[np.ndarray]:
        return self.server.global_weights(merged=self.merges)


@dataclass
class ExperimentResult:
    cfg: RunConfig
    metrics: list[RoundMetrics]
    server: ServerState
    final_accuracy: float
    data_fingerprint: str
    report: DiscrepancyReport | None = None
    trace: list[ClientRoundContext] = field(default_factory=list)


def load_dataset(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Client pool and global test set."""
    dc = cfg.data
    if dc.source == "synthetic":
        full = generate_synthetic(
            dc.n_samples + dc.n_test, cfg.model.input_dim, cfg.model.num_classes,
            dc.class_separation, make_rng(cfg.seed, Stream.DATA),
        )
        perm = make_rng(cfg.seed, Stream.SPLIT).permutation(len(full))
        return full.subset(perm[:dc.n_samples]), full.subset(perm[dc.n_samples:])
    full = standardize(load_csv(dc.csv_path))
    if full.dim != cfg.model.input_dim or full.class_count > cfg.model.num_classes:
        raise ValueError(
            f"{dc.csv_path}: {full.dim} features / {full.class_count} classes do not fit the model"
        )
    full = LabeledDataset(full.features, full.labels, cfg.model.num_classes)
    return split_train_val(full, 1.0 - dc.test_fraction, make_rng(cfg.seed, Stream.SPLIT))


def partition_clients(cfg: RunConfig, pool: LabeledDataset) -> list[LabeledDataset]:
    p = cfg.partition
    rng = make_rng(p.seed, Stream.PARTITION)
    if p.kind == "iid":
        return partition_iid(pool, cfg.num_clients, rng)
    return partition_dirichlet(pool, cfg.num_clients, p.beta, rng)


def initial_backbone(cfg: RunConfig) -> list[np.ndarray]:
    """Seeded stand-in for pretrained weights: N(0, 1/fan_in) entries."""
    out = []
    for i, (m, n) in enumerate(cfg.model.layer_shapes()):
        rng = make_rng(cfg.seed, Stream.BACKBONE, i)
        out.append(rng.standard_normal((m, n)) / math.sqrt(n))
    return out


def build_experiment(cfg: RunConfig, record_trace: bool = False) -> Experiment:
    pool, test = load_dataset(cfg)
    shards = partition_clients(cfg, pool)
    fingerprint = "|".join(s.fingerprint() for s in shards)
    backbone = initial_backbone(cfg)
    clients = []
    for cid, shard in enumerate(shards):
        train, val = shard, None
        if cfg.data.val_fraction > 0:
            try:
                train, val = split_train_val(
                    shard, 1.0 - cfg.data.val_fraction, make_rng(cfg.seed, Stream.CLIENT_SPLIT, cid)
                )
            except ValueError:
                # too few samples to hold any out
                train, val = shard, None
        clients.append(ClientState(cid, [w.copy() for w in backbone], train, val))
    server = ServerState(
        backbone=[w.copy() for w in backbone],
        factors=fresh_factors(cfg, 0),
        scale=cfg.scale,
        total_rounds=cfg.rounds,
    )
    dims_ok = all(max(shp) <= VERIFY_MAX_DIM for shp in cfg.model.layer_shapes())
    if record_trace and not dims_ok:
        log.warning("layer dims exceed %d; intermediate matrices will not be kept", VERIFY_MAX_DIM)
    return Experiment(cfg, server, clients, test, fingerprint, record_trace and dims_ok)


def select_participants(cfg: RunConfig, t: int) -> list[int]:
    k = cfg.participants_per_round
    if k >= cfg.num_clients:
        return list(range(cfg.num_clients))
    rng = make_rng(cfg.seed, Stream.SAMPLING, t)
    return sorted(int(c) for c in rng.choice(cfg.num_clients, size=k, replace=False))


def evaluate(weights, spec, test_set: LabeledDataset) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    probs = forward(spec, weights, Batch(test_set.features, test_set.labels))
    return float(np.mean(np.argmax(probs, axis=1) == test_set.labels))


def _dispatch(exp: Experiment, cid: int, t: int) -> ClientUpdate:
    cfg = exp.cfg
    state = exp.clients[cid]
    factors = exp.server.factors
    if cfg.method in FEDSMOOTH_FAMILY:
        return local_update(state, factors, t, cfg)
    if cfg.method == "fedavg_lora":
        return local_update_fedavg(state, factors, t, cfg)
    mode = "fresh" if cfg.method == "frlora_fresh" else "weight_svd"
    return local_update_frlora(state, factors, t, cfg, mode)


def _combined(norms):
    vals = [v for v in norms if v is not None]
    return math.sqrt(sum(v * v for v in vals)) if vals else None


def run_round(exp: Experiment, t: int, participants: list[int] | None = None, jobs: int = 1) -> RoundMetrics:
    """One communication round: local updates, aggregation, projection, merge."""
    cfg = exp.cfg
    if t != exp.server.round:
        raise ValueError(f"server is at round {exp.server.round}, asked to run round {t}")
    start = time.perf_counter()
    if participants is None:
        participants = select_participants(cfg, t)
    participants = sorted(participants)
    active = set(participants)
    for cid, state in enumerate(exp.clients):
        if cid not in active:
            state.pending.append(exp.server.factors)

    previous_loss = {cid: exp.clients[cid].last_loss for cid in participants}
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda c: _dispatch(exp, c, t), participants))
    else:
        results = [_dispatch(exp, cid, t) for cid in participants]

    metrics = RoundMetrics(round=t, participants=participants)
    for upd in results:
        metrics.losses[upd.client_id] = upd.losses
        prev = previous_loss[upd.client_id]
        metrics.jumps[upd.client_id] = (
            abs(upd.losses[0] - prev) if prev is not None and upd.losses else None
        )
        if upd.context is not None:
            metrics.zeta = upd.context.zeta
            metrics.eps_init[upd.client_id] = upd.context.eps_init_norm
            metrics.eps_end[upd.client_id] = upd.context.eps_end_norm
            if exp.record_trace:
                exp.trace.append(upd.context)

    updates = [u.uploaded for u in results]
    sizes = [exp.clients[u.client_id].size for u in results]
    ids = [u.client_id for u in results]
    if cfg.method in ("fedavg_lora", "fedsmooth_factor_avg"):
        new_factors = aggregate_factor_average(updates, sizes, ids)
        full = aggregate_full_rank(updates, sizes, ids)
        eps_server = [None if f is None else frobenius_norm(d - f.product()) for d, f in zip(full, new_factors)]
    else:
        delta = aggregate_full_rank(updates, sizes, ids)
        new_factors, eps_server = project_rank_r(
            delta, cfg.rank, cfg.svd_mode, rng=make_rng(cfg.seed, SERVER_SVD_STREAM, t)
        )
    merge_backbone(exp.server, new_factors, merge=exp.merges)
    exp.server.eps_server = eps_server
    metrics.eps_server = eps_server
    metrics.eval_acc = evaluate(exp.global_weights(), cfg.model, exp.test_set)
    metrics.wall_time = time.perf_counter() - start
    return metrics


def boundary_jump(metrics: list[RoundMetrics]) -> float:
    """Mean absolute loss discontinuity at round boundaries.

    Each client's jumps are averaged first, then the client means are averaged.
    """
    per_client: dict[int, list[float]] = {}
    last: dict[int, float] = {}
    for m in sorted(metrics, key=lambda m: m.round):
        for cid in sorted(m.losses):
            losses = m.losses[cid]
            if not losses:
                continue
            if cid in last:
                per_client.setdefault(cid, []).append(abs(losses[0] - last[cid]))
            last[cid] = losses[-1]
    if not per_client:
        raise ValueError("need at least two rounds of loss trajectories from one client")
    return float(np.mean([np.mean(v) for v in per_client.values()]))


def verify_proposition(trace: list[ClientRoundContext], scale: float) -> DiscrepancyReport:
    """Check the start/end state decomposition on every pair of consecutive
    participations of each client.

    The start state of round t is ``W_t - s*G_t + s*B_init A_init`` and the end
    state of the client's previous round is ``W_p - s*G_p + s*B~ A~``. Their
    difference must equal ``s(1-zeta)(sum of server products - B_c A_c) +
    s*eps_init + s*eps_end`` up to rounding.
    """
    if not trace:
        raise ValueError("trace is empty; run with verification enabled")
    by_client: dict[int, list[ClientRoundContext]] = {}
    for ctx in trace:
        by_client.setdefault(ctx.client_id, []).append(ctx)
    rows = []
    for cid in sorted(by_client):
        contexts = sorted(by_client[cid], key=lambda c: c.round)
        for prev, cur in zip(contexts, contexts[1:]):
            if cur.prev_product is None:
                continue
            for layer, init in enumerate(cur.init_factors):
                if init is None:
                    continue
                needed = (cur.backbone[layer], cur.w_ga_hat[layer], cur.eps_init[layer],
                          cur.server_product_sum[layer], prev.backbone[layer], prev.w_ga_hat[layer],
                          prev.trained_factors[layer], prev.uploaded[layer], prev.eps_end[layer])
                if any(x is None for x in needed):
                    raise ValueError(f"trace for client {cid} round {cur.round} lacks intermediates")
                start = cur.backbone[layer] - scale * cur.w_ga_hat[layer] + scale * init.product()
                end = (prev.backbone[layer] - scale * prev.w_ga_hat[layer]
                       + scale * prev.trained_factors[layer].product())
                lhs = start - end
                mismatch = cur.server_product_sum[layer] - prev.uploaded[layer].product()
                rhs = (scale * (1.0 - cur.zeta) * mismatch + scale * cur.eps_init[layer]
                       + scale * prev.eps_end[layer])
                lhs_norm = frobenius_norm(lhs)
                bound = (scale * (1.0 - cur.zeta) * frobenius_norm(mismatch)
                         + scale * frobenius_norm(cur.eps_init[layer])
                         + scale * frobenius_norm(prev.eps_end[layer]))
                rows.append(DiscrepancyRow(
                    round=cur.round, client_id=cid, layer=layer, lhs_norm=lhs_norm,
                    rhs_norm=frobenius_norm(rhs), residual=frobenius_norm(lhs - rhs),
                    bound_slack=bound - lhs_norm,
                ))
    return DiscrepancyReport(rows)


def metrics_rows(metrics: list[RoundMetrics]):
    for m in metrics:
        for cid in m.participants:
            losses = m.losses.get(cid, [])
            e_init = _combined(m.eps_init.get(cid, []))
            e_end = _combined(m.eps_end.get(cid, []))
            for step, value in enumerate(losses):
                jump = m.jumps.get(cid) if step == 0 else None
                yield (m.round, cid, step, value, m.zeta, e_init, e_end, None, None, jump)
        jumps = [j for j in m.jumps.values() if j is not None]
        mean_jump = float(np.mean(jumps)) if jumps else None
        yield (m.round, -1, None, None, m.zeta, None, None, _combined(m.eps_server), m.eval_acc, mean_jump)


def write_metrics(path, metrics: list[RoundMetrics]) -> None:
    storage.write_rows(path, storage.METRICS_HEADER, metrics_rows(metrics))


def write_discrepancy(path, report: DiscrepancyReport) -> None:
    storage.write_rows(
        path, storage.DISCREPANCY_HEADER,
        ((r.round, r.client_id, r.layer, r.lhs_norm, r.rhs_norm, r.residual, r.bound_slack) for r in report.rows),
    )


def run_experiment(
    cfg: RunConfig,
    out_dir=None,
    verify: bool = False,
    jobs: int = 1,
    trace_hook: Callable[[list[ClientRoundContext]], None] | None = None,
) -> ExperimentResult:
    """Run all rounds; with ``out_dir`` write ``metrics.csv`` and
    ``checkpoint.bin`` (plus ``discrepancy.csv`` when verifying)."""
    exp = build_experiment(cfg, record_trace=verify)
    metrics = []
    for t in range(cfg.rounds):
        m = run_round(exp, t, jobs=jobs)
        log.info("round %d: acc=%.4f", t, m.eval_acc)
        metrics.append(m)
    final_acc = metrics[-1].eval_acc if metrics else evaluate(exp.global_weights(), cfg.model, exp.test_set)

    report = None
    if verify and exp.record_trace:
        if trace_hook is not None:
            trace_hook(exp.trace)
        report = verify_proposition(exp.trace, cfg.scale)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", metrics)
        storage.save_checkpoint(out / "checkpoint.bin", exp.server.backbone, exp.server.factors, exp.server.round)
        if report is not None:
            write_discrepancy(out / "discrepancy.csv", report)
    return ExperimentResult(cfg, metrics, exp.server, final_acc, exp.data_fingerprint, report, exp.trace)
