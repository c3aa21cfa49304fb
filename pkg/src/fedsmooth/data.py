"""Datasets and client partitioning."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CsvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be 2-D")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "dirichlet"
    beta: float = 0.1
    num_clients: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.num_clients is not None and self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.kind == "dirichlet" and not self.beta > 0:
            raise ValueError("dirichlet beta must be positive")


def generate_synthetic(
    n: int, d: int, c: int, class_separation: float, rng: np.random.Generator
) -> LabeledDataset:
    """Gaussian blobs: one unit-covariance cluster per class, centred at
    ``class_separation`` times a random unit direction. Labels cycle through
    the classes, so ``n == c`` gives one sample per class."""
    if n < c:
        raise ValueError(f"need at least one sample per class (n={n}, c={c})")
    if d < 2:
        raise ValueError("d must be >= 2")
    directions = rng.standard_normal((c, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = class_separation * directions
    labels = np.arange(n) % c
    features = means[labels] + rng.standard_normal((n, d))
    return LabeledDataset(features, labels.astype(np.int64), c)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path) -> LabeledDataset:
    """Read ``f1,...,fd,label`` rows. A first row with any non-numeric cell is
    treated as a header."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = [(i + 1, row) for i, row in enumerate(csv.reader(fh)) if row]
    if rows and not all(_is_number(cell) for cell in rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    width = len(rows[0][1])
    if width < 2:
        raise CsvFormatError(f"{path}: line {rows[0][0]}: need at least one feature and a label")
    feats = np.empty((len(rows), width - 1))
    labels = np.empty(len(rows), dtype=np.int64)
    for k, (line, row) in enumerate(rows):
        if len(row) != width:
            raise CsvFormatError(f"{path}: line {line}: expected {width} cells, got {len(row)}")
        try:
            feats[k] = [float(cell) for cell in row[:-1]]
        except ValueError:
            raise CsvFormatError(f"{path}: line {line}: non-numeric feature") from None
        try:
            label = int(row[-1].strip())
        except ValueError:
            raise CsvFormatError(f"{path}: line {line}: label {row[-1]!r} is not an integer") from None
        if label < 0:
            raise CsvFormatError(f"{path}: line {line}: negative label")
        labels[k] = label
    if not np.all(np.isfinite(feats)):
        raise CsvFormatError(f"{path}: non-finite feature values")
    return LabeledDataset(feats, labels, int(labels.max()) + 1)


def save_csv(ds: LabeledDataset, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for x, y in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def standardize(ds: LabeledDataset) -> LabeledDataset:
    mean = ds.features.mean(axis=0)
    std = ds.features.std(axis=0)
    std[std == 0] = 1.0
    return LabeledDataset((ds.features - mean) / std, ds.labels, ds.class_count)


def partition_iid(ds: LabeledDataset, k: int, rng: np.random.Generator) -> list[LabeledDataset]:
    if k < 1 or k > len(ds):
        raise ValueError(f"cannot split {len(ds)} samples across {k} clients")
    perm = rng.permutation(len(ds))
    return [ds.subset(chunk) for chunk in np.array_split(perm, k)]


def sample_dirichlet(beta: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Normalised Gamma draws. All-zero draws (possible for tiny ``beta``)
    collapse onto one uniformly chosen coordinate."""
    g = rng.gamma(beta, 1.0, size=k)
    total = g.sum()
    if total == 0.0:
        p = np.zeros(k)
        p[rng.integers(k)] = 1.0
        return p
    return g / total


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    raw = total * proportions
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort keeps ties on the lowest index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(
    ds: LabeledDataset, k: int, beta: float, rng: np.random.Generator
) -> list[LabeledDataset]:
    """Label-skewed split: each class is divided across clients according to
    its own ``Dirichlet(beta)`` draw. Empty clients get one sample moved from
    the currently largest client."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not beta > 0:
        raise ValueError("beta must be positive")
    shards: list[list[int]] = [[] for _ in range(k)]
    for cls in range(ds.class_count):
        members = np.flatnonzero(ds.labels == cls)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        counts = largest_remainder(members.size, sample_dirichlet(beta, k, rng))
        start = 0
        for client, cnt in enumerate(counts):
            shards[client].extend(members[start:start + cnt].tolist())
            start += cnt
    if len(ds) >= k:
        for client in range(k):
            if not shards[client]:
                donor = max(range(k), key=lambda j: (len(shards[j]), -j))
                shards[client].append(shards[donor].pop())
    return [ds.subset(sorted(s)) for s in shards]


def split_train_val(
    ds: LabeledDataset, train_fraction: float, rng: np.random.Generator
) -> tuple[LabeledDataset, LabeledDataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n_train = int(np.floor(train_fraction * len(ds) + 0.5))
    if n_train == 0 or n_train == len(ds):
        raise ValueError(f"split of {len(ds)} samples at {train_fraction} leaves one side empty")
    perm = rng.permutation(len(ds))
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])


def label_entropy(ds: LabeledDataset) -> float:
    """Shannon entropy (nats) of the label histogram."""
    counts = ds.class_counts().astype(np.float64)
    if counts.sum() == 0:
        return 0.0
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
