"""Run configuration, JSON mapping and seeded random streams."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data import PartitionSpec
from .model import ModelSpec, TrainConfig

METHODS = (
    "fedsmooth",
    "fedavg_lora",
    "frlora_fresh",
    "frlora_weight_svd",
    "fedsmooth_no_rm",
    "fedsmooth_no_ga",
    "fedsmooth_factor_avg",
)
FEDSMOOTH_FAMILY = ("fedsmooth", "fedsmooth_no_rm", "fedsmooth_no_ga", "fedsmooth_factor_avg")


class ConfigError(ValueError):
    pass


# purpose tags for independent random streams
class Stream:
    DATA = 1
    SPLIT = 2
    PARTITION = 3
    BACKBONE = 4
    LORA_INIT = 5
    SAMPLING = 6
    CALIBRATION = 7
    TRAIN = 8
    SVD = 9
    CLIENT_SPLIT = 10


def make_rng(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    """Generator keyed by (seed, purpose, keys); independent of call order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, purpose, *keys])))


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    n_samples: int = 2000
    n_test: int = 500
    class_separation: float = 3.0
    csv_path: str | None = None
    test_fraction: float = 0.2
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            raise ConfigError("csv source needs csv_path")
        if self.source == "synthetic" and (self.n_samples < 1 or self.n_test < 1):
            raise ConfigError("n_samples and n_test must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    method: str = "fedsmooth"
    num_clients: int = 5
    rounds: int = 20
    participation_fraction: float = 1.0
    rank: int = 2
    alpha: float = 4.0
    gamma: float = 256.0
    # None resolves to "constant" for iid partitions and "decay" otherwise
    zeta_mode: str | None = None
    calib_batch_size: int = 8
    train: TrainConfig = field(default_factory=TrainConfig)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    svd_mode: str = "exact"

    def __post_init__(self):
        if self.num_clients < 1 or self.rounds < 0:
            raise ConfigError("num_clients must be >= 1 and rounds >= 0")
        # nested seeds and the partition's client count follow the top level unless given
        if self.train.seed is None:
            object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))
        if self.partition.seed is None or self.partition.num_clients is None:
            object.__setattr__(self, "partition", dataclasses.replace(
                self.partition,
                seed=self.seed if self.partition.seed is None else self.partition.seed,
                num_clients=self.num_clients if self.partition.num_clients is None
                else self.partition.num_clients,
            ))
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ConfigError("participation_fraction must lie in (0, 1]")
        if self.zeta_mode not in (None, "constant", "decay"):
            raise ConfigError(f"unknown zeta_mode {self.zeta_mode!r}")
        if self.svd_mode not in ("exact", "randomized"):
            raise ConfigError(f"unknown svd_mode {self.svd_mode!r}")
        if self.calib_batch_size < 1:
            raise ConfigError("calib_batch_size must be positive")
        if self.partition.num_clients != self.num_clients:
            raise ConfigError(
                f"partition.num_clients={self.partition.num_clients} "
                f"disagrees with num_clients={self.num_clients}"
            )
        shapes = self.model.layer_shapes()
        for i in self.model.adapted():
            if not 1 <= self.rank <= min(shapes[i]):
                raise ConfigError(f"rank {self.rank} does not fit layer {i} of shape {shapes[i]}")
        if self.alpha <= 0 or self.gamma <= 0:
            raise ConfigError("alpha and gamma must be positive")

    @property
    def scale(self) -> float:
        return self.alpha / math.sqrt(self.rank)

    @property
    def participants_per_round(self) -> int:
        return max(1, math.ceil(self.participation_fraction * self.num_clients - 1e-12))

    @property
    def resolved_zeta_mode(self) -> str:
        if self.zeta_mode is not None:
            return self.zeta_mode
        return "constant" if self.partition.kind == "iid" else "decay"

    def resolved(self) -> "RunConfig":
        return dataclasses.replace(self, zeta_mode=self.resolved_zeta_mode)

    def with_method(self, method: str) -> "RunConfig":
        return dataclasses.replace(self, method=method)

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {"train": TrainConfig, "partition": PartitionSpec, "model": ModelSpec, "data": DataConfig}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = dict(raw)
    if cls is ModelSpec and kwargs.get("adapted_layers") is not None:
        kwargs["adapted_layers"] = tuple(kwargs["adapted_layers"])
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    kwargs = dict(raw)
    for key, cls in _NESTED.items():
        if key in kwargs:
            kwargs[key] = _build(cls, kwargs[key], key)
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
