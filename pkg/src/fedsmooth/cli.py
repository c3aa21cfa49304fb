"""``fedsmooth`` command line: run, ablate, verify, partition-stats.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 the
state-discrepancy identity failed verification.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import storage
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import label_entropy
from .orchestrator import (
    VERIFY_MAX_DIM,
    boundary_jump,
    load_dataset,
    partition_clients,
    run_experiment,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_MATH = 0, 1, 2, 3

ABLATION_METHODS = (
    "fedsmooth",
    "fedsmooth_no_rm",
    "fedsmooth_no_ga",
    "fedavg_lora",
    "frlora_fresh",
    "fedsmooth_factor_avg",
)
ABLATION_HEADER = ("method", "final_accuracy", "mean_boundary_jump", "data_fingerprint")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsmooth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "ablate", "verify"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--jobs", type=int, default=1, help="concurrent client updates per round")
        if name == "verify":
            sp.add_argument("--verify-tolerance", type=float, default=1e-8)
    sp = sub.add_parser("partition-stats")
    sp.add_argument("--config", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _jump_or_none(metrics):
    try:
        return boundary_jump(metrics)
    except ValueError:
        return None


def cmd_run(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.resolved()
    dump_config(cfg, out / "config.resolved.json")
    result = run_experiment(cfg, out_dir=out, jobs=jobs)
    print(f"final_accuracy={result.final_accuracy:.6f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for method in ABLATION_METHODS:
        mcfg = cfg.with_method(method).resolved()
        result = run_experiment(mcfg, out_dir=out / method, jobs=jobs)
        dump_config(mcfg, out / method / "config.resolved.json")
        rows.append((method, result.final_accuracy, _jump_or_none(result.metrics), result.data_fingerprint))
        print(f"{method}: final_accuracy={result.final_accuracy:.6f}")
    storage.write_rows(out / "ablation_summary.csv", ABLATION_HEADER, rows)
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Path, tolerance: float = 1e-8, jobs: int = 1, trace_hook=None) -> int:
    too_big = [shp for shp in cfg.model.layer_shapes() if max(shp) > VERIFY_MAX_DIM]
    if too_big:
        print(f"error: verify needs layer dims <= {VERIFY_MAX_DIM}, got {too_big}", file=sys.stderr)
        return EXIT_CONFIG
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.resolved()
    dump_config(cfg, out / "config.resolved.json")
    result = run_experiment(cfg, out_dir=out, verify=True, jobs=jobs, trace_hook=trace_hook)
    report = result.report
    if report is None or not report.rows:
        print("error: no consecutive client participations to check", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"checked={len(report.rows)}")
    print(f"max_residual={report.max_residual:.3e}")
    print(f"max_state_gap={report.max_gap:.3e}")
    print(f"min_bound_slack={report.min_slack:.3e}")
    return EXIT_OK if report.holds(tolerance) else EXIT_MATH


def cmd_partition_stats(cfg: RunConfig) -> int:
    pool, _ = load_dataset(cfg)
    shards = partition_clients(cfg, pool)
    print("client,count,label_entropy")
    entropies = []
    for cid, shard in enumerate(shards):
        h = label_entropy(shard)
        entropies.append(h)
        print(f"{cid},{len(shard)},{h:.6f}")
    print(f"total={sum(len(s) for s in shards)} mean_entropy={np.mean(entropies):.6f}")
    return EXIT_OK


def main(argv=None, trace_hook=None) -> int:
    """Entry point; ``trace_hook`` lets tests tamper with the verification trace."""
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return cmd_run(cfg, Path(args.out), args.jobs)
        if args.command == "ablate":
            return cmd_ablate(cfg, Path(args.out), args.jobs)
        if args.command == "verify":
            return cmd_verify(cfg, Path(args.out), args.verify_tolerance, args.jobs, trace_hook)
        return cmd_partition_stats(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
