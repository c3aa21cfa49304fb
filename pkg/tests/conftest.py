import dataclasses

import numpy as np
import pytest

from fedsmooth.config import DataConfig, RunConfig
from fedsmooth.data import PartitionSpec
from fedsmooth.model import ModelSpec, TrainConfig


def small_config(**overrides) -> RunConfig:
    """A few-second run: 3 clients, 3 rounds, 8-dim softmax regression."""
    base = dict(
        num_clients=3,
        rounds=3,
        model=ModelSpec(kind="softmax_regression", input_dim=8, num_classes=4),
        train=TrainConfig(steps_per_round=10, batch_size=16),
        data=DataConfig(n_samples=300, n_test=100),
        partition=PartitionSpec(kind="dirichlet", beta=0.5),
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


def mlp_config(**overrides) -> RunConfig:
    overrides.setdefault("model", ModelSpec(kind="mlp2", input_dim=8, hidden_dim=6, num_classes=4))
    return small_config(**overrides)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def replace(cfg, **kw):
    return dataclasses.replace(cfg, **kw)
