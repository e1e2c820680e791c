# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

from scipy import constants as _constants

EVENTS_FOLDER_PATH = Path(__file__).parent / "events"
SCHEMAS_FOLDER_PATH = Path(__file__).parent / "schemas"
DATA_FOLDER_PATH = Path(__file__).parent / "data"

QLONN_SWEEP_EVENTS_URI = "https://schema.qlonn.org/qlonn/sweep/v1"
SWEEP_EVENTS_SCHEMA_PATH = EVENTS_FOLDER_PATH / "sweep.yaml"
QLONN_TRAINING_EVENTS_URI = "https://schema.qlonn.org/qlonn/training/v1"
TRAINING_EVENTS_SCHEMA_PATH = EVENTS_FOLDER_PATH / "training.yaml"
NETWORK_SCHEMA_PATH = SCHEMAS_FOLDER_PATH / "network.json"


class LogLevel(Enum):
    INFO = "INFO"
    DEBUG = "DEBUG"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class NoiseMode(Enum):
    NOISELESS = "noiseless"
    GAUSSIAN = "gaussian"
    POISSON = "poisson"


class QlonnError(Exception):
    """Base class of every error raised by qlonn."""


class ZeroNormSignal(QlonnError, ValueError):
    """A nonzero photon budget was requested on an all-zero signal."""


class ZeroBudget(QlonnError, ValueError):
    pass


class NonFinite(QlonnError, ValueError):
    pass


class DimensionMismatch(QlonnError, ValueError):
    pass


class ShapeMismatch(QlonnError, ValueError):
    pass


class KernelLargerThanImage(ShapeMismatch):
    pass


class EmptyLogits(QlonnError, ValueError):
    pass


class MissingTape(QlonnError, LookupError):
    pass


class UnknownMultiplier(QlonnError, LookupError):
    pass


class NoCrossing(QlonnError, ValueError):
    """The error-rate curve never satisfies the threshold within its range."""


class BadMagic(QlonnError, ValueError):
    pass


class CountMismatch(QlonnError, ValueError):
    pass


class TruncatedFile(QlonnError, ValueError):
    pass


class NetworkFileError(QlonnError, ValueError):
    pass


class ValidationFailure(QlonnError):
    pass


@dataclass(frozen=True)
class PhysicalConstants:
    """CODATA 2018 values (exact in the 2019 SI)."""

    h: float = _constants.h  # 6.62607015e-34 J s
    c: float = _constants.c  # 299792458 m/s
    k_B: float = _constants.k  # 1.380649e-23 J/K


CONSTANTS = PhysicalConstants()


def canonical_json(data: Any) -> str:
    """Serializes `data` with sorted keys and no whitespace."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(data: dict[str, Any]) -> str:
    """
    Hashes a resolved configuration.

        Parameters:
            data (dict): Numerical configuration; worker counts and paths must not be included.

        Returns:
            digest (str): The first 16 hex digits of the SHA-256 of the canonical JSON.
    """
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()[:16]
