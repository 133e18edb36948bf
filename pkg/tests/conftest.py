"""Shared fixtures: small cohorts and desk-scale model configs."""

import numpy as np
import pytest
import torch

from deepbgp import dbgp, synthdata
from deepbgp.encoder import EncoderConfig


def small_encoder_config(pool_size: int = 24, **overrides) -> EncoderConfig:
    defaults = dict(
        hidden_size=24,
        n_layers=1,
        n_heads=4,
        intermediate_size=32,
        dropout=0.1,
        pool_size=pool_size,
    )
    defaults.update(overrides)
    return EncoderConfig(**defaults)


def small_head_config(**overrides) -> dbgp.HeadConfig:
    defaults = dict(grid_points_per_dim=12, whitened_points_per_dim=4, lengthscale=0.4)
    defaults.update(overrides)
    return dbgp.HeadConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_cohort():
    config = synthdata.CohortConfig(
        n_patients=300, positive_rate=0.3, n_codes=40, n_risk_codes=3, noise_rate=0.1, seed=5
    )
    vocabulary, records = synthdata.generate_cohort(config)
    return config, vocabulary, records


@pytest.fixture(scope="session")
def tiny_model(tiny_cohort):
    _, vocabulary, _ = tiny_cohort
    return dbgp.DbgpModel(
        vocabulary,
        dbgp.ModelVariant.from_name("DBGP"),
        small_encoder_config(pool_size=12),
        small_head_config(grid_points_per_dim=8),
        seed=3,
    )


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    np.random.seed(0)
