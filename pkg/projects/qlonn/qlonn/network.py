# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.
"""Network description and noisy forward execution.

Batches are laid out the way the optical hardware sees them: flat activations are N x B
matrices (one column per sample), image activations are B x W x H x C arrays.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, ClassVar, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import norm

from .noise import NoiseConfig, NoisyArray, PhotonBudget, noisy_matvec
from .patching import conv_macs, conv_via_gemm, output_size
from .utils import EmptyLogits, ShapeMismatch
from .workers import TrialPool, chunked

if TYPE_CHECKING:
    from .loaders import Dataset

log = logging.getLogger(__name__)

Shape = tuple[int, ...]

_Z95 = float(norm.ppf(0.975))


class Activation(Enum):
    RELU = "relu"
    IDENTITY = "identity"

    def __call__(self, y: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(y, 0.0)
        return y

    def derivative(self, y: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return (y > 0).astype(np.float64)
        return np.ones_like(y)


@dataclass(frozen=True, eq=False)
class FullyConnected:
    """N' x N weight matrix, with an optional exact (electronic) bias."""

    weights: np.ndarray
    activation: Activation = Activation.RELU
    bias: np.ndarray | None = None

    kind: ClassVar[str] = "fc"
    noisy: ClassVar[bool] = True

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 1 or input_shape[0] != self.weights.shape[1]:
            raise ShapeMismatch(
                f"Fully-connected weights {self.weights.shape} cannot take input {input_shape}"
            )
        return (self.weights.shape[0],)

    def macs(self, input_shape: Shape) -> int:
        return int(self.weights.size)


@dataclass(frozen=True, eq=False)
class Conv2D:
    """K_x x K_y x C' x C kernel applied as a valid convolution."""

    kernel: np.ndarray
    strides: tuple[int, int] = (1, 1)
    activation: Activation = Activation.RELU
    bias: np.ndarray | None = None

    kind: ClassVar[str] = "conv"
    noisy: ClassVar[bool] = True

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3 or input_shape[2] != self.kernel.shape[3]:
            raise ShapeMismatch(f"Kernel {self.kernel.shape} cannot take input {input_shape}")
        w_out, h_out = output_size(input_shape[:2], self.kernel.shape[:2], self.strides)
        return (w_out, h_out, self.kernel.shape[2])

    def macs(self, input_shape: Shape) -> int:
        return conv_macs(input_shape, self.kernel.shape, self.strides)  # type: ignore[arg-type]


@dataclass(frozen=True)
class MaxPool:
    window: tuple[int, int] = (2, 2)
    strides: tuple[int, int] = (2, 2)

    kind: ClassVar[str] = "maxpool"
    noisy: ClassVar[bool] = False

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3:
            raise ShapeMismatch(f"Max pooling needs an image input, got {input_shape}")
        return output_size(input_shape[:2], self.window, self.strides) + (input_shape[2],)

    def windows(self, x: np.ndarray) -> np.ndarray:
        """(B, W', H', C, w_x, w_y) view of the pooling windows of a batch."""
        s_x, s_y = self.strides
        return sliding_window_view(x, self.window, axis=(1, 2))[:, ::s_x, ::s_y]


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "flatten"
    noisy: ClassVar[bool] = False

    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)


LayerSpec = Union[FullyConnected, Conv2D, MaxPool, Flatten]


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """An ordered list of layers with a validated shape chain."""

    layers: tuple[LayerSpec, ...]
    input_shape: Shape
    class_count: int
    shapes: tuple[Shape, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        shapes = [self.input_shape]
        for index, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeMismatch as e:
                raise ShapeMismatch(f"Layer {index} ({layer.kind}): {e}") from e
        if shapes[-1] != (self.class_count,):
            raise ShapeMismatch(
                f"The network outputs {shapes[-1]} but declares {self.class_count} classes"
            )
        object.__setattr__(self, "shapes", tuple(shapes))

    @classmethod
    def dense(
        cls, sizes: Sequence[int], rng: np.random.Generator, bias: bool = True
    ) -> NetworkSpec:
        """A ReLU multilayer perceptron with He-initialised weights and an identity readout."""
        layers = []
        for index, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = index == len(sizes) - 2
            layers.append(
                FullyConnected(
                    rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)),
                    Activation.IDENTITY if last else Activation.RELU,
                    np.zeros(n_out) if bias else None,
                )
            )
        return cls(tuple(layers), (sizes[0],), sizes[-1])

    @property
    def noisy_layers(self) -> list[int]:
        """Indices of the layers computed optically."""
        return [i for i, layer in enumerate(self.layers) if layer.noisy]

    @property
    def noisy_layer_count(self) -> int:
        return len(self.noisy_layers)

    def mac_counts(self) -> list[int]:
        return [self.layers[i].macs(self.shapes[i]) for i in self.noisy_layers]  # type: ignore

    def with_layers(self, layers: Sequence[LayerSpec]) -> NetworkSpec:
        return replace(self, layers=tuple(layers))


@dataclass(frozen=True)
class LayerNoisePolicy:
    """
    Photon budget of every optical layer; None marks a noiseless layer.

    With `ablation_layer` set, only that optical layer (counted among FC/Conv layers from 0)
    keeps its noise. Distinct budgets per layer go beyond a single shared n_mac.
    """

    budgets: tuple[PhotonBudget | None, ...]
    ablation_layer: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "budgets", tuple(self.budgets))
        if self.ablation_layer is not None and not 0 <= self.ablation_layer < len(self.budgets):
            raise ValueError(
                f"ablation_layer {self.ablation_layer} outside of {len(self.budgets)} layers"
            )

    @classmethod
    def uniform(cls, count: int, budget: PhotonBudget | None) -> LayerNoisePolicy:
        return cls((budget,) * count)

    @classmethod
    def noiseless(cls, count: int) -> LayerNoisePolicy:
        return cls((None,) * count)

    @classmethod
    def ablation(cls, count: int, layer: int, budget: PhotonBudget) -> LayerNoisePolicy:
        return cls((budget,) * count, ablation_layer=layer)

    def budget_for(self, index: int) -> PhotonBudget | None:
        if self.ablation_layer is not None and index != self.ablation_layer:
            return None
        return self.budgets[index]

    def check(self, net: NetworkSpec) -> None:
        if len(self.budgets) != net.noisy_layer_count:
            raise ShapeMismatch(
                f"The policy has {len(self.budgets)} budget(s) for "
                f"{net.noisy_layer_count} optical layer(s)"
            )


def batch_inputs(input_shape: Shape, samples: np.ndarray) -> np.ndarray:
    """Lays out (B, ...) samples as the network's input batch."""
    samples = np.asarray(samples, dtype=np.float64)
    batch = samples.shape[0]
    if len(input_shape) == 1:
        return samples.reshape(batch, -1).T
    return samples.reshape((batch,) + tuple(input_shape))


def expected_photons(net: NetworkSpec, policy: LayerNoisePolicy, noise: NoiseConfig) -> float:
    """Optical photons of one inference, summed over layers."""
    if noise.is_noiseless:
        return 0.0
    total = 0.0
    for index, macs in enumerate(net.mac_counts()):
        budget = policy.budget_for(index)
        if budget is not None:
            total += budget.total() * macs
    return total


def _dark_aware_matvec(
    weights: np.ndarray,
    x: np.ndarray,
    budget: PhotonBudget | None,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> NoisyArray:
    # All-zero columns send no light; their outputs are exactly zero.
    if budget is None or noise.is_noiseless:
        return noisy_matvec(weights, x, budget, noise, rng)
    lit = np.any(x != 0, axis=0)
    if lit.all() and np.any(weights):
        return noisy_matvec(weights, x, budget, noise, rng)
    values = np.zeros((weights.shape[0], x.shape[1]))
    if not lit.any() or not np.any(weights):
        return NoisyArray(values, 0.0)
    result = noisy_matvec(weights, x[:, lit], budget, noise, rng)
    values[:, lit] = result.values
    return NoisyArray(values, result.photons_consumed)


def forward_batch(
    net: NetworkSpec,
    inputs: np.ndarray,
    policy: LayerNoisePolicy,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """
    Runs a batch through the network; every sample gets its own photon budget.

        Parameters:
            net (NetworkSpec): The network.
            inputs (ndarray): Batch laid out by `batch_inputs`.
            policy (LayerNoisePolicy): Budget of each optical layer.
            noise (NoiseConfig): Noise model.
            rng (Generator): Random stream, consumed layer by layer.

        Returns:
            logits (ndarray): class_count x B matrix.
            photons (float): Photons used per sample.
    """
    policy.check(net)
    x = np.asarray(inputs, dtype=np.float64)
    photons = 0.0
    optical = 0
    for layer in net.layers:
        if isinstance(layer, FullyConnected):
            result = _dark_aware_matvec(layer.weights, x, policy.budget_for(optical), noise, rng)
            y = result.values
            if layer.bias is not None:
                y = y + layer.bias[:, None]
            photons += result.photons_consumed / x.shape[1]
            x = layer.activation(y)
            optical += 1
        elif isinstance(layer, Conv2D):
            budget = policy.budget_for(optical)
            outputs = []
            for image in x:
                dark = not np.any(image) or not np.any(layer.kernel)
                result = conv_via_gemm(
                    layer.kernel, image, layer.strides, noise, None if dark else budget, rng
                )
                outputs.append(result.values)
                photons += result.photons_consumed / x.shape[0]
            y = np.stack(outputs)
            if layer.bias is not None:
                y = y + layer.bias
            x = layer.activation(y)
            optical += 1
        elif isinstance(layer, MaxPool):
            x = layer.windows(x).max(axis=(-2, -1))
        elif x.ndim == 4:
            x = x.reshape(x.shape[0], -1).T
    return x, photons


def forward(
    net: NetworkSpec,
    sample: np.ndarray,
    policy: LayerNoisePolicy,
    noise: NoiseConfig,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, float]:
    """Noisy inference of a single sample. Returns (logits, photons_total)."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.size != int(np.prod(net.input_shape)):
        raise ShapeMismatch(f"Input of shape {sample.shape} does not match {net.input_shape}")
    inputs = batch_inputs(net.input_shape, sample[None])
    logits, photons = forward_batch(net, inputs, policy, noise, rng or noise.stream())
    return logits[:, 0], photons


def classify(logits: np.ndarray) -> int:
    """Index of the largest logit; ties go to the lowest index."""
    logits = np.asarray(logits)
    if logits.size == 0:
        raise EmptyLogits("Cannot classify empty logits")
    return int(np.argmax(logits))


def top_k_hits(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> np.ndarray:
    """
    Whether each true label ranks among the k largest logits of its column.

    Ranking follows the `classify` tie rule: equal logits rank by index.
    """
    labels = np.asarray(labels)
    columns = np.arange(logits.shape[1])
    true = logits[labels, columns]
    greater = (logits > true).sum(axis=0)
    classes = np.arange(logits.shape[0])[:, None]
    ties_before = ((logits == true) & (classes < labels)).sum(axis=0)
    return (greater + ties_before) < k


@dataclass(frozen=True)
class ErrorEstimate:
    error_rate: float
    ci95: float
    trials: int
    samples: int
    photons_per_inference: float
    top_k: int = 1


def monte_carlo_error_rate(
    net: NetworkSpec,
    dataset: Dataset,
    policy: LayerNoisePolicy,
    noise: NoiseConfig,
    trials: int,
    top_k: int = 1,
    chunk_size: int = 256,
    pool: TrialPool | None = None,
    stream_key: tuple[int, ...] = (),
) -> ErrorEstimate:
    """
    Estimates the (top-k) error rate by re-drawing the noise in every trial.

    Work is split into (trial, chunk) units of `chunk_size` samples; unit (t, c) draws from
    `noise.stream(*stream_key, t, c)`. In the noiseless mode all trials coincide, so a single
    one is evaluated and the confidence interval only reflects the finite sample.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    count = len(dataset)
    if count == 0:
        raise ValueError("The dataset is empty")
    policy.check(net)
    effective_trials = 1 if noise.is_noiseless else trials
    chunks = chunked(count, chunk_size)
    units = [(t, c) for t in range(effective_trials) for c in range(len(chunks))]

    def _misses(unit: tuple[int, int]) -> int:
        trial, chunk = unit
        part = chunks[chunk]
        inputs = batch_inputs(net.input_shape, dataset.images[part])
        rng = noise.stream(*stream_key, trial, chunk)
        logits, _ = forward_batch(net, inputs, policy, noise, rng)
        return int((~top_k_hits(logits, dataset.labels[part], top_k)).sum())

    pool = pool or TrialPool()
    misses = sum(pool.map(_misses, units))
    evaluated = effective_trials * count
    error_rate = misses / evaluated
    ci95 = _Z95 * float(np.sqrt(error_rate * (1.0 - error_rate) / evaluated))
    log.debug("Error rate %s +/- %s over %s evaluation(s)", error_rate, ci95, evaluated)
    return ErrorEstimate(
        error_rate=error_rate,
        ci95=ci95,
        trials=effective_trials,
        samples=count,
        photons_per_inference=expected_photons(net, policy, noise),
        top_k=top_k,
    )
