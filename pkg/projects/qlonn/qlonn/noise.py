# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.
"""Shot-noise models of homodyne matrix products.

Two families of models live here:

- the exact Poisson photocurrent model: every detector (or detector pair) draws the
  photoelectron counts of both beamsplitter outputs and reports their difference;
- the Gaussian standard-quantum-limit model derived from it in the limit of many photons per
  detector, which adds independent zero-mean Gaussian noise with a closed-form deviation.

Logical values are mapped to photon-normalized field amplitudes with scaling factors chosen so
that the signal carries exactly the requested number of photons per multiply-and-accumulate
(MAC). All accumulation is done in double precision.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
from traitlets import Bool, CaselessStrEnum, Int, TraitError, validate
from traitlets.config import Configurable

from .utils import (
    DimensionMismatch,
    NoiseMode,
    NonFinite,
    ZeroBudget,
    ZeroNormSignal,
)

log = logging.getLogger(__name__)

# Upper bound on the elements of a temporary (rows x inner x columns) intensity block.
_BLOCK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class PhotonBudget:
    """Photons per MAC carried by the data (input) and the weight signals."""

    n_mac_input: float = 0.0
    n_mac_weight: float = 0.0

    def __post_init__(self) -> None:
        for name in ("n_mac_input", "n_mac_weight"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite number >= 0, got {value!r}")

    @classmethod
    def equal_split(cls, n_mac: float) -> PhotonBudget:
        return cls(n_mac / 2, n_mac / 2)

    @classmethod
    def split(cls, n_mac: float, input_fraction: float) -> PhotonBudget:
        """Splits `n_mac` with `input_fraction` of the photons on the data signal."""
        if not 0 <= input_fraction <= 1:
            raise ValueError(f"input_fraction must be in [0, 1], got {input_fraction!r}")
        return cls(n_mac * input_fraction, n_mac * (1 - input_fraction))

    def total(self) -> float:
        return self.n_mac_input + self.n_mac_weight

    def require_photons(self) -> None:
        """Raises ZeroBudget unless both signals carry light."""
        if self.n_mac_input <= 0 or self.n_mac_weight <= 0:
            raise ZeroBudget(
                f"Noisy products need photons on both signals, got {self!r}; "
                "use the noiseless mode instead"
            )


@dataclass(frozen=True)
class ScalingFactors:
    """Logical to photon-amplitude scales of the data (`xi_x`) and weight (`xi_w`) signals."""

    xi_x: float
    xi_w: float

    @property
    def alpha(self) -> float:
        return 1.0 / (2.0 * self.xi_w)


@dataclass(frozen=True)
class NoisyArray:
    """Result of a noisy product, in logical units, with the optical photons it used."""

    values: np.ndarray
    photons_consumed: float


NoisyVector = NoisyArray
NoisyMatrix = NoisyArray


class NoiseConfig(Configurable):
    """Selects the noise model and the master seed of every random stream."""

    mode = CaselessStrEnum(
        [m.value for m in NoiseMode],
        default_value=NoiseMode.GAUSSIAN.value,
        config=True,
        help="""The noise model: 'noiseless' (exact products), 'gaussian' (standard quantum
        limit model) or 'poisson' (exact photocurrent statistics).""",
    )

    seed = Int(
        0,
        config=True,
        help="""The master seed. Every Monte Carlo unit derives its own stream from it.""",
    )

    row_norm_approx = Bool(
        False,
        config=True,
        help="""Whether the Gaussian model replaces each weight-row norm by the global norm
        divided by the square root of the row count.""",
    )

    @validate("seed")
    def _valid_seed(self, proposal):
        if not 0 <= proposal["value"] < 2**64:
            raise TraitError("seed must be a 64-bit unsigned integer")
        return proposal["value"]

    @property
    def noise_mode(self) -> NoiseMode:
        return NoiseMode(self.mode)

    @property
    def is_noiseless(self) -> bool:
        return self.noise_mode is NoiseMode.NOISELESS

    def stream(self, *key: int) -> np.random.Generator:
        """
        Returns the independent random stream of a unit of work.

            Parameters:
                key (int...): Unit identifier, e.g. (sweep point, trial, chunk).

            Returns:
                rng (Generator): A Philox generator seeded with SeedSequence(seed, key).
        """
        sequence = np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(sequence))

    def as_dict(self) -> dict[str, Union[str, int, bool]]:
        return {"mode": self.mode, "seed": self.seed, "row_norm_approx": self.row_norm_approx}


def _as_float_array(value: np.ndarray, name: str) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise NonFinite(f"{name} contains NaN or infinite entries")
    return array


def _scale(norm: float | np.ndarray, photons: float, n_mac: float) -> float | np.ndarray:
    # xi such that xi^2 * norm^2 = photons * n_mac
    if n_mac <= 0:
        raise ZeroBudget("Scaling factors need a nonzero photon budget on both signals")
    norm = np.asarray(norm, dtype=np.float64)
    if np.any(norm == 0):
        raise ZeroNormSignal(
            "Cannot place a nonzero photon budget on an all-zero signal; "
            "use the noiseless mode for zero activations"
        )
    xi = np.sqrt(photons * n_mac) / norm
    return float(xi) if xi.ndim == 0 else xi


def scaling_factors(
    x_norm: float, w_norm: float, n_in: int, n_out: int, budget: PhotonBudget
) -> ScalingFactors:
    """
    Inverts the photons-per-MAC relations of a matrix-vector product.

        Parameters:
            x_norm (float): L2 norm of the data vector.
            w_norm (float): Frobenius norm of the weight matrix.
            n_in (int): Input length N.
            n_out (int): Output length N'.
            budget (PhotonBudget): Photons per MAC on each signal.

        Returns:
            factors (ScalingFactors): With xi_x^2 ||x||^2 / N = n_mac_input and
                xi_w^2 ||A||^2 / (N N') = n_mac_weight.

        Raises:
            ZeroNormSignal: if a norm is zero.
            ZeroBudget: if a budget component is zero.
    """
    if n_in < 1 or n_out < 1:
        raise DimensionMismatch(f"Dimensions must be >= 1, got n_in={n_in}, n_out={n_out}")
    xi_x = _scale(x_norm, n_in, budget.n_mac_input)
    xi_w = _scale(w_norm, n_in * n_out, budget.n_mac_weight)
    return ScalingFactors(xi_x=xi_x, xi_w=xi_w)


def _matrix_scaling(
    a_norm: float, b_norm: float, m: int, n: int, k: int, budget: PhotonBudget
) -> ScalingFactors:
    # A (m x k) is fanned out over n columns, B (k x n) over m rows.
    xi_a = _scale(a_norm, m * k, budget.n_mac_weight)
    xi_b = _scale(b_norm, n * k, budget.n_mac_input)
    return ScalingFactors(xi_x=xi_b, xi_w=xi_a)


def _check_matvec(weights: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    weights = _as_float_array(weights, "weights")
    x = _as_float_array(x, "x")
    if weights.ndim != 2 or x.ndim not in (1, 2) or weights.shape[1] != x.shape[0]:
        raise DimensionMismatch(
            f"Cannot multiply weights of shape {weights.shape} with x of shape {x.shape}"
        )
    return weights, x


def _check_matmul(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = _as_float_array(a, "A")
    b = _as_float_array(b, "B")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"Cannot multiply A of shape {a.shape} with B of shape {b.shape}")
    return a, b


def _homodyne_counts(a_bar: np.ndarray, b_bar: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Draws the photocurrent difference of every detector.

    Detector (i, j) interferes the pulse train a_bar[i, :] with b_bar[:, j]; its two outputs
    receive Poisson(sum_l (a_bar[i, l] +/- b_bar[l, j])^2 / 2) photoelectrons.
    """
    m, k = a_bar.shape
    n = b_bar.shape[1]
    plus = np.empty((m, n))
    minus = np.empty((m, n))
    block = max(1, _BLOCK_ELEMENTS // max(1, m * k))
    for start in range(0, n, block):
        cols = b_bar[None, :, start : start + block]
        rows = a_bar[:, :, None]
        plus[:, start : start + block] = 0.5 * np.square(rows + cols).sum(axis=1)
        minus[:, start : start + block] = 0.5 * np.square(rows - cols).sum(axis=1)
    # Sums of squares: intensities are nonnegative by construction.
    assert np.all(plus >= 0) and np.all(minus >= 0)
    q_plus = rng.poisson(plus)
    q_minus = rng.poisson(minus)
    return (q_plus - q_minus).astype(np.float64)


def noise_std_mv(
    weights: np.ndarray, x: np.ndarray, budget: PhotonBudget, row_norm_approx: bool = False
) -> np.ndarray:
    """
    Standard deviation of the Gaussian shot noise of each output of A x.

    `x` may be a vector or a matrix of independent column vectors, each with its own scaling.
    """
    weights, x = _check_matvec(weights, x)
    budget.require_photons()
    n_out, n_in = weights.shape
    columns = x.reshape(n_in, -1)
    x_norms = np.linalg.norm(columns, axis=0)
    w_norm = np.linalg.norm(weights)
    factors = scaling_factors(x_norms, w_norm, n_in, n_out, budget)  # type: ignore[arg-type]
    if row_norm_approx:
        row_sq = np.full(n_out, w_norm**2 / n_out)
    else:
        row_sq = np.square(weights).sum(axis=1)
    variance = 0.25 * (
        row_sq[:, None] / np.square(factors.xi_x)[None, :]
        + np.square(x_norms)[None, :] / factors.xi_w**2
    )
    return np.sqrt(variance).reshape((n_out,) + x.shape[1:])


def noise_std_mm(
    a: np.ndarray, b: np.ndarray, budget: PhotonBudget, row_norm_approx: bool = False
) -> np.ndarray:
    """Standard deviation of the Gaussian shot noise of each entry of the GEMM A B."""
    a, b = _check_matmul(a, b)
    budget.require_photons()
    m, k = a.shape
    n = b.shape[1]
    a_norm = np.linalg.norm(a)
    b_norm = np.linalg.norm(b)
    factors = _matrix_scaling(a_norm, b_norm, m, n, k, budget)
    if row_norm_approx:
        row_sq = np.full(m, a_norm**2 / m)
        col_sq = np.full(n, b_norm**2 / n)
    else:
        row_sq = np.square(a).sum(axis=1)
        col_sq = np.square(b).sum(axis=0)
    variance = 0.25 * (row_sq[:, None] / factors.xi_x**2 + col_sq[None, :] / factors.xi_w**2)
    return np.sqrt(variance)


def homodyne_mv_poisson(
    weights: np.ndarray, x: np.ndarray, budget: PhotonBudget, rng: np.random.Generator
) -> NoisyArray:
    """
    Exact Poisson simulation of the homodyne matrix-vector product A x.

        Parameters:
            weights (ndarray): N' x N weight matrix.
            x (ndarray): Length-N vector, or N x B matrix of independent vectors.
            budget (PhotonBudget): Photons per MAC on each signal.
            rng (Generator): Random stream.

        Returns:
            result (NoisyArray): Pre-activation outputs in logical units.
    """
    weights, x = _check_matvec(weights, x)
    budget.require_photons()
    n_out, n_in = weights.shape
    columns = x.reshape(n_in, -1)
    factors = scaling_factors(
        np.linalg.norm(columns, axis=0),  # type: ignore[arg-type]
        float(np.linalg.norm(weights)),
        n_in,
        n_out,
        budget,
    )
    xi_x = np.atleast_1d(factors.xi_x)
    counts = _homodyne_counts(factors.xi_w * weights, columns * xi_x[None, :], rng)
    values = counts / (2.0 * factors.xi_w * xi_x[None, :])
    photons = budget.total() * n_in * n_out * columns.shape[1]
    return NoisyArray(values.reshape((n_out,) + x.shape[1:]), photons)


def homodyne_mv_gaussian(
    weights: np.ndarray,
    x: np.ndarray,
    budget: PhotonBudget,
    rng: np.random.Generator,
    row_norm_approx: bool = False,
) -> NoisyArray:
    """Gaussian standard-quantum-limit model of the homodyne matrix-vector product A x."""
    std = noise_std_mv(weights, x, budget, row_norm_approx)
    weights, x = _check_matvec(weights, x)
    exact = weights @ x
    values = exact + std * rng.standard_normal(exact.shape)
    return NoisyArray(values, budget.total() * weights.size * (x.size // x.shape[0]))


def homodyne_mm_gaussian(
    a: np.ndarray,
    b: np.ndarray,
    budget: PhotonBudget,
    rng: np.random.Generator,
    row_norm_approx: bool = False,
) -> NoisyArray:
    """Gaussian standard-quantum-limit model of the optical GEMM A B."""
    std = noise_std_mm(a, b, budget, row_norm_approx)
    a, b = _check_matmul(a, b)
    exact = a @ b
    values = exact + std * rng.standard_normal(exact.shape)
    return NoisyArray(values, budget.total() * a.shape[0] * a.shape[1] * b.shape[1])


def homodyne_mm_poisson(
    a: np.ndarray, b: np.ndarray, budget: PhotonBudget, rng: np.random.Generator
) -> NoisyArray:
    """Exact Poisson simulation of the optical GEMM A B, one homodyne pixel per entry."""
    a, b = _check_matmul(a, b)
    budget.require_photons()
    m, k = a.shape
    n = b.shape[1]
    factors = _matrix_scaling(np.linalg.norm(a), np.linalg.norm(b), m, n, k, budget)
    counts = _homodyne_counts(factors.xi_w * a, factors.xi_x * b, rng)
    values = counts / (2.0 * factors.xi_w * factors.xi_x)
    return NoisyArray(values, budget.total() * m * n * k)


def noise_variance_for_split(
    a_norm: float, b_norm: float, m: int, n: int, k: int, split: PhotonBudget
) -> float:
    """Per-entry noise variance of a GEMM under the row-norm approximation for a given split."""
    if split.n_mac_input <= 0 or split.n_mac_weight <= 0:
        raise ZeroBudget(f"Both split components must be > 0, got {split!r}")
    return (
        a_norm**2
        * b_norm**2
        / (4.0 * m * n * k)
        * (1.0 / split.n_mac_weight + 1.0 / split.n_mac_input)
    )


def noisy_matvec(
    weights: np.ndarray,
    x: np.ndarray,
    budget: PhotonBudget | None,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> NoisyArray:
    """Matrix-vector product under the configured noise model; `budget=None` means exact."""
    if budget is None or noise.is_noiseless:
        weights, x = _check_matvec(weights, x)
        return NoisyArray(weights @ x, 0.0)
    if noise.noise_mode is NoiseMode.POISSON:
        return homodyne_mv_poisson(weights, x, budget, rng)
    return homodyne_mv_gaussian(weights, x, budget, rng, noise.row_norm_approx)


def noisy_matmul(
    a: np.ndarray,
    b: np.ndarray,
    budget: PhotonBudget | None,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> NoisyArray:
    """GEMM under the configured noise model; `budget=None` means exact."""
    if budget is None or noise.is_noiseless:
        a, b = _check_matmul(a, b)
        return NoisyArray(a @ b, 0.0)
    if noise.noise_mode is NoiseMode.POISSON:
        return homodyne_mm_poisson(a, b, budget, rng)
    return homodyne_mm_gaussian(a, b, budget, rng, noise.row_norm_approx)
