"""Shared fixtures: the toy shape dataset and one trained toy network.

Training runs once per session; the end-to-end, whitening, and determinism
tests all reuse the same run (plus one deliberate re-run for the
reproducibility check).
"""

import numpy as np
import pytest

from edgemac.convnet import MAXPOOL, RELU, ConvLayer, NetworkConfig
from edgemac.synthdata import toy_shape_dataset
from edgemac.training import TrainConfig, train

TOY_SEED = 7
TOY_SIZE = 48
TOY_EXTRACT_MAX_SIDE = 48
TOY_EXTRACT_PAD = 16


def toy_net_config() -> NetworkConfig:
    return NetworkConfig(
        layers=(
            ConvLayer(1, 8), RELU, MAXPOOL,
            ConvLayer(8, 16), RELU, MAXPOOL,
            ConvLayer(16, 32), RELU,
        ),
        descriptor_dim=32,
    )


def toy_train_config() -> TrainConfig:
    return TrainConfig(
        max_epochs=15,
        train_max_side=TOY_SIZE,
        seed=TOY_SEED,
    )


@pytest.fixture(scope="session")
def toy_data():
    return toy_shape_dataset(seed=TOY_SEED, size=TOY_SIZE)


@pytest.fixture(scope="session")
def toy_run(toy_data):
    """(best_weights, history) of one full toy training run."""
    weights, history = train(toy_data.train, toy_train_config(), net_config=toy_net_config())
    return weights, history


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240811)
