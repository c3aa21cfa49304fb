"""On-disk formats: binary checkpoints and the metrics / discrepancy CSVs.

Checkpoint layout (all little-endian)::

    b"FSLR"  u32 version
    repeated matrices: u32 rows, u32 cols, rows*cols f64
        (backbone layers, then B and A for each layer)
    u32 round

A layer without an adapter stores an (m x 0) ``B`` and a (0 x n) ``A``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import FactorPair

MAGIC = b"FSLR"
FORMAT_VERSION = 1

METRICS_HEADER = (
    "round", "client_id", "step", "train_loss", "zeta",
    "eps_init", "eps_end", "eps_server", "eval_acc", "boundary_jump",
)
DISCREPANCY_HEADER = ("round", "client_id", "layer", "lhs_norm", "rhs_norm", "residual", "bound_slack")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    backbone: list[np.ndarray]
    factors: list[FactorPair | None]
    round: int


def _pack_matrix(m: np.ndarray) -> bytes:
    rows, cols = m.shape
    return struct.pack("<II", rows, cols) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def encode_checkpoint(backbone, factors, round_: int) -> bytes:
    if len(backbone) != len(factors):
        raise CheckpointError("backbone and factor lists differ in length")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts += [_pack_matrix(w) for w in backbone]
    for w, f in zip(backbone, factors):
        if f is None:
            f = FactorPair(np.zeros((w.shape[0], 0)), np.zeros((0, w.shape[1])))
        parts += [_pack_matrix(f.b), _pack_matrix(f.a)]
    parts.append(struct.pack("<I", round_))
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic bytes")
    if len(blob) < 12:
        raise CheckpointError("truncated checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    mats = []
    # everything but the trailing round counter is a sequence of matrices
    while len(blob) - pos > 4:
        if len(blob) - pos < 8:
            raise CheckpointError("truncated matrix header")
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        nbytes = rows * cols * 8
        if len(blob) - pos < nbytes:
            raise CheckpointError("truncated matrix data")
        mats.append(np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64))
        pos += nbytes
    if len(blob) - pos != 4 or len(mats) % 3:
        raise CheckpointError("malformed checkpoint body")
    (round_,) = struct.unpack_from("<I", blob, pos)
    layers = len(mats) // 3
    backbone = mats[:layers]
    factors = []
    for i in range(layers):
        b, a = mats[layers + 2 * i], mats[layers + 2 * i + 1]
        factors.append(None if b.shape[1] == 0 else FactorPair(b, a))
    return Checkpoint(backbone, factors, round_)


def save_checkpoint(path, backbone, factors, round_: int) -> None:
    Path(path).write_bytes(encode_checkpoint(backbone, factors, round_))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def fmt(value) -> str:
    """17 significant digits for floats, empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return f"{float(value):.17g}"


def write_rows(path, header, rows) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
