# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

from ._version import __version__  # noqa
from .energy import EnergyParams, energy_budget, landauer_limit, sql_extract  # noqa
from .loaders import Dataset, load_mnist_idx, load_network, save_network  # noqa
from .network import (  # noqa
    LayerNoisePolicy,
    NetworkSpec,
    classify,
    forward,
    monte_carlo_error_rate,
)
from .noise import NoiseConfig, PhotonBudget, noisy_matmul, noisy_matvec  # noqa
from .sweeps import SweepConfig, run_sweep  # noqa
from .training import TrainingConfig, train_loop  # noqa
