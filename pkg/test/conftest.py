"""Pytest configuration and shared fixtures for the deskworld test suite."""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

# Make the project root importable for test modules.
PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from config import TrainConfig  # noqa: E402

# Small enough for finite differences and a few seconds of training.
TINY = dict(
    image_size=16,
    cnn_depth=4,
    hidden_size=16,
    recurrent_size=16,
    mlp_layers=2,
    num_latents=4,
    classes_per_latent=4,
    batch_size=4,
    batch_length=5,
    horizon=4,
    twohot_bins=31,
    replay_capacity=5000,
    env_instances=2,
    min_steps=16,
    train_ratio=20,
    eval_every=10_000,
    checkpoint_every=10_000,
    eval_episodes=1,
)
TINY_OVERRIDES = [f"{key}={value}" for key, value in TINY.items()]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def seeded():
    torch.manual_seed(0)
    np.random.seed(0)
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    def build(**changes) -> TrainConfig:
        return TrainConfig(**{**TINY, **changes})

    return build
