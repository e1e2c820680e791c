# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.
"""Back-propagation through the optical GEMM engine.

Every large product of a training step (the forward product, the weight gradient
dA = dY X^T and the input gradient dX = A^T dY) goes through `noisy_matmul`, so each of them
may carry shot noise. Activation derivatives, the loss, pooling and the weight update are
electronic and exact.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from logging import Logger
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.special import log_softmax, softmax
from traitlets import Bool, Float, Int, TraitError, validate
from traitlets.config import Configurable

from .network import (
    Conv2D,
    Flatten,
    FullyConnected,
    LayerNoisePolicy,
    MaxPool,
    NetworkSpec,
    batch_inputs,
    forward_batch,
)
from .noise import NoiseConfig, NoisyArray, PhotonBudget, noisy_matmul
from .patching import fold_patches, im2col_batch, kernel_to_matrix, matrix_to_kernel
from .utils import QLONN_TRAINING_EVENTS_URI, LogLevel, MissingTape, ShapeMismatch
from .workers import chunked

if TYPE_CHECKING:
    from jupyter_events import EventLogger

    from .loaders import Dataset

log = logging.getLogger(__name__)


class TrainingConfig(Configurable):
    """Hyper-parameters of `train_loop`."""

    epochs = Int(10, config=True, help="Number of passes over the training set.")

    batch_size = Int(
        64,
        config=True,
        help="""Samples per step. The batch is the right factor of every forward GEMM, so
        it also sets the number of columns sharing one scaling factor.""",
    )

    learning_rate = Float(0.1, config=True, help="Initial SGD step size.")

    lr_decay = Float(
        1.0, config=True, help="Multiplicative learning-rate decay applied after each epoch."
    )

    momentum = Float(0.0, config=True, help="SGD momentum; 0 is plain gradient descent.")

    noisy_forward = Bool(True, config=True, help="Whether forward GEMMs carry shot noise.")

    noisy_weight_grad = Bool(
        True, config=True, help="Whether the weight-gradient GEMMs carry shot noise."
    )

    noisy_input_grad = Bool(
        True, config=True, help="Whether the input-gradient GEMMs carry shot noise."
    )

    seed = Int(0, config=True, help="Seed of the per-epoch shuffling.")

    @validate("epochs", "batch_size")
    def _positive_count(self, proposal):
        if proposal["value"] < 1:
            raise TraitError(f"{proposal['trait'].name} must be >= 1")
        return proposal["value"]

    @validate("learning_rate")
    def _positive_rate(self, proposal):
        if not proposal["value"] > 0:
            raise TraitError("learning_rate must be > 0")
        return proposal["value"]

    @validate("lr_decay")
    def _valid_decay(self, proposal):
        if not 0 < proposal["value"] <= 1:
            raise TraitError("lr_decay must be in (0, 1]")
        return proposal["value"]

    @validate("momentum")
    def _valid_momentum(self, proposal):
        if not 0 <= proposal["value"] < 1:
            raise TraitError("momentum must be in [0, 1)")
        return proposal["value"]

    @validate("seed")
    def _valid_seed(self, proposal):
        if not 0 <= proposal["value"] < 2**64:
            raise TraitError("seed must be a 64-bit unsigned integer")
        return proposal["value"]

    def as_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in sorted(self.class_trait_names(config=True))}


@dataclass
class TapeEntry:
    """What backward needs from the forward pass of one layer."""

    index: int
    kind: str
    inputs: np.ndarray
    pre_activations: np.ndarray | None = None
    patches: np.ndarray | None = None


@dataclass
class GradientSet:
    """Weight (kernel, for conv layers) and bias gradients keyed by layer index."""

    weights: dict[int, np.ndarray] = field(default_factory=dict)
    biases: dict[int, np.ndarray] = field(default_factory=dict)
    photons: float = 0.0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    photons: float
    learning_rate: float
    test_accuracy: float | None = None


def _optical_product(
    a: np.ndarray,
    b: np.ndarray,
    budget: PhotonBudget | None,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> NoisyArray:
    # An all-zero factor sends no light: the product is exactly zero and costs nothing.
    if budget is not None and (not np.any(a) or not np.any(b)):
        return NoisyArray(np.zeros((a.shape[0], b.shape[1])), 0.0)
    return noisy_matmul(a, b, budget, noise, rng)


def forward_train(
    net: NetworkSpec,
    inputs: np.ndarray,
    noise: NoiseConfig,
    budget: PhotonBudget | None,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[TapeEntry], float]:
    """
    Forward pass over a batch that records the tape.

    FC layers compute one GEMM A X over the whole N x B batch, conv layers one GEMM of the
    kernel matrix with the patch matrix of the whole batch; both share a single scaling per
    GEMM.

        Returns:
            logits (ndarray): class_count x B matrix.
            tape (list[TapeEntry]): One entry per layer.
            photons (float): Optical photons of the batch.
    """
    x = np.asarray(inputs, dtype=np.float64)
    tape: list[TapeEntry] = []
    photons = 0.0
    for index, layer in enumerate(net.layers):
        if isinstance(layer, FullyConnected):
            product = _optical_product(layer.weights, x, budget, noise, rng)
            y = product.values
            if layer.bias is not None:
                y = y + layer.bias[:, None]
            tape.append(TapeEntry(index, layer.kind, x, y))
            photons += product.photons_consumed
            x = layer.activation(y)
        elif isinstance(layer, Conv2D):
            k_x, k_y = layer.kernel.shape[:2]
            patches = im2col_batch(x, k_x, k_y, *layer.strides)
            product = _optical_product(kernel_to_matrix(layer.kernel), patches, budget, noise, rng)
            w_out, h_out, c_out = layer.output_shape(x.shape[1:])
            y = product.values.T.reshape(x.shape[0], w_out, h_out, c_out)
            if layer.bias is not None:
                y = y + layer.bias
            tape.append(TapeEntry(index, layer.kind, x, y, patches))
            photons += product.photons_consumed
            x = layer.activation(y)
        elif isinstance(layer, MaxPool):
            tape.append(TapeEntry(index, layer.kind, x))
            x = layer.windows(x).max(axis=(-2, -1))
        else:
            tape.append(TapeEntry(index, layer.kind, x))
            if x.ndim == 4:
                x = x.reshape(x.shape[0], -1).T
    return x, tape, photons


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of class_count x B logits and its gradient with respect to them."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    batch = logits.shape[1]
    columns = np.arange(batch)
    loss = -float(log_softmax(logits, axis=0)[labels, columns].mean())
    grad = softmax(logits, axis=0)
    grad[labels, columns] -= 1.0
    return loss, grad / batch


def _maxpool_backward(layer: MaxPool, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    w_x, w_y = layer.window
    s_x, s_y = layer.strides
    windows = layer.windows(x)
    winner = windows.reshape(windows.shape[:4] + (w_x * w_y,)).argmax(axis=-1)
    d_i, d_j = np.divmod(winner, w_y)
    b, i, j, c = np.indices(winner.shape)
    grad_in = np.zeros_like(x)
    np.add.at(grad_in, (b, i * s_x + d_i, j * s_y + d_j, c), grad)
    return grad_in


def backward(
    net: NetworkSpec,
    tape: list[TapeEntry],
    grad_logits: np.ndarray,
    noise: NoiseConfig,
    budget: PhotonBudget | None,
    rng: np.random.Generator | None = None,
    noisy_weight_grad: bool = True,
    noisy_input_grad: bool = True,
) -> GradientSet:
    """
    Back-propagates the gradient of the loss with respect to the logits.

        Parameters:
            net (NetworkSpec): The network the tape was recorded on.
            tape (list[TapeEntry]): Output of `forward_train`.
            grad_logits (ndarray): class_count x B gradient.
            noise (NoiseConfig): Noise model of the gradient GEMMs.
            budget (PhotonBudget | None): Photons per MAC of the gradient GEMMs.
            rng (Generator | None): Random stream; defaults to `noise.stream()`.
            noisy_weight_grad (bool): Whether dA = dY X^T is noisy.
            noisy_input_grad (bool): Whether dX = A^T dY is noisy.

        Returns:
            gradients (GradientSet): One gradient per FC/Conv layer, shaped like its weights.

        Raises:
            MissingTape: if the tape does not cover every layer.
    """
    entries = {entry.index: entry for entry in tape}
    missing = [i for i in range(len(net.layers)) if i not in entries]
    if missing:
        raise MissingTape(f"No forward record for layer(s) {missing}; run forward_train first")
    rng = rng or noise.stream()
    weight_budget = budget if noisy_weight_grad else None
    input_budget = budget if noisy_input_grad else None
    gradients = GradientSet()
    grad = np.asarray(grad_logits, dtype=np.float64)
    if grad.ndim != 2 or grad.shape[0] != net.class_count:
        raise ShapeMismatch(f"grad_logits of shape {grad.shape} does not match the logits")

    for index in reversed(range(len(net.layers))):
        layer, entry = net.layers[index], entries[index]
        first = index == 0
        if isinstance(layer, FullyConnected):
            grad_y = grad * layer.activation.derivative(entry.pre_activations)
            grad_a = _optical_product(grad_y, entry.inputs.T, weight_budget, noise, rng)
            gradients.weights[index] = grad_a.values
            gradients.photons += grad_a.photons_consumed
            if layer.bias is not None:
                gradients.biases[index] = grad_y.sum(axis=1)
            if not first:
                grad_x = _optical_product(layer.weights.T, grad_y, input_budget, noise, rng)
                gradients.photons += grad_x.photons_consumed
                grad = grad_x.values
        elif isinstance(layer, Conv2D):
            grad_y = grad * layer.activation.derivative(entry.pre_activations)
            c_out = layer.kernel.shape[2]
            # rows: output channels, columns: (sample, i, j) as in im2col_batch
            grad_y_matrix = grad_y.reshape(-1, c_out).T
            grad_k = _optical_product(grad_y_matrix, entry.patches.T, weight_budget, noise, rng)
            gradients.weights[index] = matrix_to_kernel(grad_k.values, layer.kernel.shape)
            gradients.photons += grad_k.photons_consumed
            if layer.bias is not None:
                gradients.biases[index] = grad_y.sum(axis=(0, 1, 2))
            if not first:
                grad_p = _optical_product(
                    kernel_to_matrix(layer.kernel).T, grad_y_matrix, input_budget, noise, rng
                )
                gradients.photons += grad_p.photons_consumed
                grad = fold_patches(
                    grad_p.values, entry.inputs.shape, layer.kernel.shape[:2], layer.strides
                )
        elif isinstance(layer, MaxPool):
            grad = _maxpool_backward(layer, entry.inputs, grad)
        elif entry.inputs.ndim == 4:
            grad = grad.T.reshape(entry.inputs.shape)
    return gradients


def sgd_step(weights: np.ndarray, grads: np.ndarray, learning_rate: float) -> np.ndarray:
    """w - lr g."""
    weights = np.asarray(weights, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if weights.shape != grads.shape:
        raise ShapeMismatch(f"Gradient of shape {grads.shape} for weights of shape {weights.shape}")
    if not learning_rate > 0:
        raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
    return weights - learning_rate * grads


class SGD:
    """Stochastic gradient descent with optional momentum over a whole network."""

    def __init__(self, learning_rate: float, momentum: float = 0.0) -> None:
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity: dict[tuple[int, str], np.ndarray] = {}

    def _update(self, key: tuple[int, str], value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.momentum == 0:
            return sgd_step(value, grad, self.learning_rate)
        velocity = self.momentum * self._velocity.get(key, np.zeros_like(grad)) + grad
        self._velocity[key] = velocity
        return sgd_step(value, velocity, self.learning_rate)

    def step(self, net: NetworkSpec, gradients: GradientSet) -> NetworkSpec:
        layers = list(net.layers)
        for index, grad in gradients.weights.items():
            layer = layers[index]
            bias = layer.bias  # type: ignore[union-attr]
            if bias is not None and index in gradients.biases:
                bias = self._update((index, "bias"), bias, gradients.biases[index])
            if isinstance(layer, FullyConnected):
                weights = self._update((index, "weight"), layer.weights, grad)
                layers[index] = replace(layer, weights=weights, bias=bias)
            elif isinstance(layer, Conv2D):
                kernel = self._update((index, "weight"), layer.kernel, grad)
                layers[index] = replace(layer, kernel=kernel, bias=bias)
        return net.with_layers(layers)


def evaluate_accuracy(net: NetworkSpec, dataset: Dataset, chunk_size: int = 256) -> float:
    """Noiseless top-1 accuracy."""
    noise = NoiseConfig(mode="noiseless")
    policy = LayerNoisePolicy.noiseless(net.noisy_layer_count)
    hits = 0
    for part in chunked(len(dataset), chunk_size):
        inputs = batch_inputs(net.input_shape, dataset.images[part])
        logits, _ = forward_batch(net, inputs, policy, noise, noise.stream())
        hits += int((logits.argmax(axis=0) == dataset.labels[part]).sum())
    return hits / len(dataset)


def _emit(
    event_logger: EventLogger | None,
    level: LogLevel,
    action: str | None = None,
    msg: str | None = None,
    **payload: Any,
) -> None:
    if event_logger is None:
        return
    data: dict[str, Any] = {"level": level.value}
    if action:
        data["action"] = action
    if msg:
        data["msg"] = msg
    data.update(payload)
    event_logger.emit(schema_id=QLONN_TRAINING_EVENTS_URI, data=data)


def train_loop(
    net: NetworkSpec,
    dataset: Dataset,
    config: TrainingConfig,
    noise: NoiseConfig,
    budget: PhotonBudget | None,
    test_set: Dataset | None = None,
    event_logger: EventLogger | None = None,
    log: Logger | None = None,
) -> tuple[NetworkSpec, list[EpochRecord]]:
    """
    Mini-batch training with the cross-entropy loss.

    Step b of epoch e draws its noise from `noise.stream(e, b)`; the sample order of epoch e
    is a permutation seeded with (config.seed, e). Identical seeds give identical weights.

        Returns:
            net (NetworkSpec): The trained network.
            history (list[EpochRecord]): One record per epoch; `photons` is cumulative.
    """
    log = log or logging.getLogger(__name__)
    if len(dataset) == 0:
        raise ValueError("The training set is empty")
    optimizer = SGD(config.learning_rate, config.momentum)
    forward_budget = budget if config.noisy_forward else None
    history: list[EpochRecord] = []
    photons = 0.0
    _emit(event_logger, LogLevel.INFO, "start", f"Training for {config.epochs} epoch(s)")
    for epoch in range(config.epochs):
        order = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(epoch,)))
        ).permutation(len(dataset))
        loss_sum = 0.0
        hits = 0
        for batch, part in enumerate(chunked(len(dataset), config.batch_size)):
            chosen = order[part]
            inputs = batch_inputs(net.input_shape, dataset.images[chosen])
            labels = dataset.labels[chosen]
            rng = noise.stream(epoch, batch)
            logits, tape, forward_photons = forward_train(net, inputs, noise, forward_budget, rng)
            loss, grad_logits = softmax_cross_entropy(logits, labels)
            gradients = backward(
                net,
                tape,
                grad_logits,
                noise,
                budget,
                rng,
                config.noisy_weight_grad,
                config.noisy_input_grad,
            )
            net = optimizer.step(net, gradients)
            photons += forward_photons + gradients.photons
            loss_sum += loss * len(chosen)
            hits += int((logits.argmax(axis=0) == labels).sum())

        record = EpochRecord(
            epoch=epoch,
            loss=loss_sum / len(dataset),
            accuracy=hits / len(dataset),
            photons=photons,
            learning_rate=optimizer.learning_rate,
            test_accuracy=None if test_set is None else evaluate_accuracy(net, test_set),
        )
        history.append(record)
        log.info(
            "Epoch %s: loss %s, accuracy %s, test accuracy %s",
            epoch,
            record.loss,
            record.accuracy,
            record.test_accuracy,
        )
        payload = {
            "epoch": epoch,
            "loss": record.loss,
            "accuracy": record.accuracy,
            "photons": record.photons,
            "learning_rate": record.learning_rate,
        }
        if record.test_accuracy is not None:
            payload["test_accuracy"] = record.test_accuracy
        _emit(event_logger, LogLevel.INFO, "epoch", f"Epoch {epoch} done", **payload)
        optimizer.learning_rate *= config.lr_decay

    _emit(event_logger, LogLevel.INFO, "end", "Training finished")
    return net, history
