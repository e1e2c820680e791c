# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest
from qlonn.loaders import load_mnist_idx, load_synthetic, save_network
from qlonn.network import Activation, Conv2D, Flatten, FullyConnected, MaxPool, NetworkSpec
from qlonn.noise import NoiseConfig
from qlonn.training import TrainingConfig, train_loop

from .utils import FakeEventLogger

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def qlonn_rng():
    return np.random.default_rng(20190524)


@pytest.fixture
def qlonn_noise():
    """Builds a NoiseConfig."""

    def _inner(mode: str = "gaussian", seed: int = 0, **kwargs) -> NoiseConfig:
        return NoiseConfig(mode=mode, seed=seed, **kwargs)

    return _inner


@pytest.fixture
def qlonn_synthetic():
    return load_synthetic()


@pytest.fixture
def qlonn_synthetic_net():
    """Separates the vendored dataset: bright left columns are class 0, bright right ones 1."""
    column = np.array([1.0, 1.0, -1.0, -1.0])
    left_minus_right = np.tile(column, 4)
    hidden = FullyConnected(np.stack([left_minus_right, -left_minus_right]), Activation.RELU)
    readout = FullyConnected(np.eye(2), Activation.IDENTITY)
    return NetworkSpec((hidden, readout), (16,), 2)


@pytest.fixture
def qlonn_conv_net(qlonn_rng):
    """4x4x1 input, conv, max pooling and a readout."""
    return NetworkSpec(
        (
            Conv2D(qlonn_rng.normal(size=(2, 2, 3, 1)), (1, 1), Activation.RELU, np.zeros(3)),
            MaxPool((2, 2), (1, 1)),
            Flatten(),
            FullyConnected(qlonn_rng.normal(size=(2, 12)), Activation.IDENTITY),
        ),
        (4, 4, 1),
        2,
    )


@pytest.fixture
def qlonn_network_files(tmp_path, qlonn_synthetic_net):
    """Writes the synthetic network and returns (network path, weights path)."""
    network_path = tmp_path / "network.json"
    weights_path = tmp_path / "weights.bin"
    save_network(qlonn_synthetic_net, network_path, weights_path)
    return network_path, weights_path


@pytest.fixture
def qlonn_event_logger():
    return FakeEventLogger()


def _load_mnist_split(prefix: str):
    directory = os.environ.get("QLONN_MNIST_DIR")
    if not directory:
        pytest.skip("QLONN_MNIST_DIR is not set")
    root = Path(directory)
    paths = []
    for name in (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"):
        candidates = [root / name, root / f"{name}.gz"]
        found = next((p for p in candidates if p.exists()), None)
        if found is None:
            pytest.skip(f"{name} not found in {root}")
        paths.append(found)
    return load_mnist_idx(*paths)


@pytest.fixture
def qlonn_mnist():
    """The MNIST test set from $QLONN_MNIST_DIR; skips when it is not available."""
    return _load_mnist_split("t10k")


@pytest.fixture
def qlonn_mnist_train():
    """The MNIST training set from $QLONN_MNIST_DIR; skips when it is not available."""
    return _load_mnist_split("train")


@pytest.fixture
def qlonn_mnist_mlp(qlonn_mnist_train):
    """A 784-100-10 network trained noiselessly on 10k MNIST training images for 20 epochs."""
    noise = NoiseConfig(mode="noiseless")
    net = NetworkSpec.dense([784, 100, 10], noise.stream())
    config = TrainingConfig(epochs=20, batch_size=32, learning_rate=0.1, lr_decay=0.9)
    trained, _ = train_loop(net, qlonn_mnist_train.subset(10_000), config, noise, None)
    return trained
