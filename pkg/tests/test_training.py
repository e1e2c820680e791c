# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from qlonn.network import (
    Activation,
    Conv2D,
    Flatten,
    FullyConnected,
    LayerNoisePolicy,
    MaxPool,
    NetworkSpec,
    batch_inputs,
    forward_batch,
)
from qlonn.noise import NoiseConfig, PhotonBudget
from qlonn.training import (
    SGD,
    TrainingConfig,
    backward,
    evaluate_accuracy,
    forward_train,
    sgd_step,
    softmax_cross_entropy,
    train_loop,
)
from qlonn.utils import QLONN_TRAINING_EVENTS_URI, MissingTape, ShapeMismatch
from scipy.stats import norm
from traitlets import TraitError

NOISELESS = NoiseConfig(mode="noiseless")


def _loss(net, inputs, labels):
    logits, _, _ = forward_train(net, inputs, NOISELESS, None, NOISELESS.stream())
    return softmax_cross_entropy(logits, labels)[0]


def _numerical_gradient(net, inputs, labels, index, h=1e-5):
    layer = net.layers[index]
    name = "weights" if isinstance(layer, FullyConnected) else "kernel"
    values = getattr(layer, name)
    grad = np.zeros_like(values)
    for position in np.ndindex(values.shape):
        shifted = []
        for sign in (1.0, -1.0):
            changed = values.copy()
            changed[position] += sign * h
            layers = list(net.layers)
            layers[index] = replace(layer, **{name: changed})
            shifted.append(_loss(net.with_layers(layers), inputs, labels))
        grad[position] = (shifted[0] - shifted[1]) / (2 * h)
    return grad


def test_zero_output_gradient_gives_zero_gradients(qlonn_synthetic_net, qlonn_synthetic):
    inputs = qlonn_synthetic.as_inputs(qlonn_synthetic_net.input_shape)
    noise = NoiseConfig()
    budget = PhotonBudget.equal_split(1.0)
    _, tape, _ = forward_train(qlonn_synthetic_net, inputs, noise, budget, noise.stream())

    gradients = backward(qlonn_synthetic_net, tape, np.zeros((2, 8)), noise, budget)

    assert set(gradients.weights) == {0, 1}
    for grad in gradients.weights.values():
        assert not np.any(grad)


def test_fully_connected_gradient_matches_finite_differences(qlonn_rng):
    weights = qlonn_rng.normal(size=(10, 8))
    inputs = qlonn_rng.normal(size=(8, 6))
    targets = qlonn_rng.normal(size=(10, 6))
    net = NetworkSpec((FullyConnected(weights, Activation.IDENTITY),), (8,), 10)

    logits, tape, _ = forward_train(net, inputs, NOISELESS, None, NOISELESS.stream())
    gradients = backward(net, tape, logits - targets, NOISELESS, None)

    def _square_loss(w):
        return 0.5 * np.sum((w @ inputs - targets) ** 2)

    h = 1e-5
    numerical = np.zeros_like(weights)
    for position in np.ndindex(weights.shape):
        plus, minus = weights.copy(), weights.copy()
        plus[position] += h
        minus[position] -= h
        numerical[position] = (_square_loss(plus) - _square_loss(minus)) / (2 * h)
    np.testing.assert_allclose(gradients.weights[0], numerical, rtol=1e-5, atol=1e-7)


def test_conv_gradients_match_finite_differences(qlonn_rng):
    net = NetworkSpec(
        (
            Conv2D(qlonn_rng.normal(size=(2, 2, 3, 2)), (1, 1), Activation.RELU),
            Conv2D(qlonn_rng.normal(size=(3, 3, 2, 3)), (2, 2), Activation.IDENTITY),
            Flatten(),
            FullyConnected(qlonn_rng.normal(size=(3, 8)), Activation.IDENTITY),
        ),
        (6, 6, 2),
        3,
    )
    inputs = batch_inputs(net.input_shape, qlonn_rng.normal(size=(2, 6, 6, 2)))
    labels = np.array([0, 2])

    logits, tape, _ = forward_train(net, inputs, NOISELESS, None, NOISELESS.stream())
    _, grad_logits = softmax_cross_entropy(logits, labels)
    gradients = backward(net, tape, grad_logits, NOISELESS, None)

    for index in (0, 1, 3):
        numerical = _numerical_gradient(net, inputs, labels, index)
        np.testing.assert_allclose(gradients.weights[index], numerical, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("strides", [(1, 1), (2, 2)])
def test_conv_gradient_of_a_small_image_matches_finite_differences(qlonn_rng, strides):
    kernel = qlonn_rng.normal(size=(3, 3, 3, 2))
    side = 3 if strides == (1, 1) else 2
    net = NetworkSpec(
        (
            Conv2D(kernel, strides, Activation.IDENTITY),
            Flatten(),
            FullyConnected(qlonn_rng.normal(size=(2, side * side * 3)), Activation.IDENTITY),
        ),
        (5, 5, 2),
        2,
    )
    inputs = batch_inputs(net.input_shape, qlonn_rng.normal(size=(2, 5, 5, 2)))
    labels = np.array([1, 0])

    logits, tape, _ = forward_train(net, inputs, NOISELESS, None, NOISELESS.stream())
    _, grad_logits = softmax_cross_entropy(logits, labels)
    gradients = backward(net, tape, grad_logits, NOISELESS, None)

    for index in (0, 2):
        numerical = _numerical_gradient(net, inputs, labels, index)
        np.testing.assert_allclose(gradients.weights[index], numerical, rtol=1e-5, atol=1e-8)


def test_flatten_of_a_flat_input_keeps_the_gradient_layout(qlonn_rng):
    net = NetworkSpec(
        (
            FullyConnected(qlonn_rng.normal(size=(3, 4)), Activation.RELU),
            Flatten(),
            FullyConnected(qlonn_rng.normal(size=(2, 3)), Activation.IDENTITY),
        ),
        (4,),
        2,
    )
    inputs = qlonn_rng.normal(size=(4, 3))
    labels = np.array([0, 1, 1])

    logits, tape, _ = forward_train(net, inputs, NOISELESS, None, NOISELESS.stream())
    hidden = np.maximum(net.layers[0].weights @ inputs, 0.0)
    np.testing.assert_allclose(logits, net.layers[2].weights @ hidden, atol=1e-12)

    _, grad_logits = softmax_cross_entropy(logits, labels)
    gradients = backward(net, tape, grad_logits, NOISELESS, None)
    for index in (0, 2):
        numerical = _numerical_gradient(net, inputs, labels, index)
        np.testing.assert_allclose(gradients.weights[index], numerical, rtol=1e-5, atol=1e-8)


def test_max_pooling_gradient_matches_finite_differences(qlonn_conv_net, qlonn_rng):
    inputs = batch_inputs(qlonn_conv_net.input_shape, qlonn_rng.normal(size=(3, 4, 4, 1)))
    labels = np.array([1, 0, 1])

    logits, tape, _ = forward_train(qlonn_conv_net, inputs, NOISELESS, None, NOISELESS.stream())
    _, grad_logits = softmax_cross_entropy(logits, labels)
    gradients = backward(qlonn_conv_net, tape, grad_logits, NOISELESS, None)

    numerical = _numerical_gradient(qlonn_conv_net, inputs, labels, 0)
    np.testing.assert_allclose(gradients.weights[0], numerical, rtol=1e-5, atol=1e-8)
    assert gradients.biases[0].shape == (3,)


def test_noisy_gradients_are_unbiased(qlonn_rng):
    net = NetworkSpec(
        (
            FullyConnected(qlonn_rng.normal(size=(4, 5)), Activation.IDENTITY),
            FullyConnected(qlonn_rng.normal(size=(3, 4)), Activation.IDENTITY),
        ),
        (5,),
        3,
    )
    inputs = qlonn_rng.normal(size=(5, 6))
    grad_logits = qlonn_rng.normal(size=(3, 6))
    _, tape, _ = forward_train(net, inputs, NOISELESS, None, NOISELESS.stream())
    exact = backward(net, tape, grad_logits, NOISELESS, None).weights[0]

    noise = NoiseConfig(seed=7)
    budget = PhotonBudget.equal_split(10.0)
    samples = np.stack(
        [
            backward(net, tape, grad_logits, noise, budget, noise.stream(trial)).weights[0]
            for trial in range(4000)
        ]
    )

    standard_error = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    # 3 sigma for the whole matrix: Bonferroni over its entries
    bound = norm.isf(norm.sf(3.0) / exact.size)
    assert np.all(np.abs(samples.mean(axis=0) - exact) < bound * standard_error)
    assert np.all(samples.std(axis=0) > 0)


def test_backward_needs_the_whole_tape(qlonn_synthetic_net, qlonn_synthetic):
    inputs = qlonn_synthetic.as_inputs(qlonn_synthetic_net.input_shape)
    _, tape, _ = forward_train(qlonn_synthetic_net, inputs, NOISELESS, None, NOISELESS.stream())

    with pytest.raises(MissingTape):
        backward(qlonn_synthetic_net, tape[1:], np.zeros((2, 8)), NOISELESS, None)

    with pytest.raises(ShapeMismatch):
        backward(qlonn_synthetic_net, tape, np.zeros((3, 8)), NOISELESS, None)


def test_sgd_step():
    np.testing.assert_array_equal(sgd_step(np.ones(3), np.zeros(3), 0.1), np.ones(3))
    assert sgd_step(np.array([1.0]), np.array([0.25]), 1.0)[0] == 0.75

    with pytest.raises(ShapeMismatch):
        sgd_step(np.ones(3), np.ones(2), 0.1)
    with pytest.raises(ValueError):
        sgd_step(np.ones(3), np.ones(3), 0.0)


def test_linear_regression_converges_to_least_squares(qlonn_rng):
    inputs = qlonn_rng.normal(size=(4, 50))
    targets = qlonn_rng.normal(size=(2, 4)) @ inputs + 0.1 * qlonn_rng.normal(size=(2, 50))
    net = NetworkSpec((FullyConnected(np.zeros((2, 4)), Activation.IDENTITY),), (4,), 2)
    optimizer = SGD(learning_rate=0.5)

    for _ in range(500):
        logits, tape, _ = forward_train(net, inputs, NOISELESS, None, NOISELESS.stream())
        gradients = backward(net, tape, (logits - targets) / inputs.shape[1], NOISELESS, None)
        net = optimizer.step(net, gradients)

    solution = np.linalg.lstsq(inputs.T, targets.T, rcond=None)[0].T
    np.testing.assert_allclose(net.layers[0].weights, solution, atol=1e-3)


def test_single_sample_batch_equals_the_matvec_path(qlonn_rng):
    net = NetworkSpec(
        (FullyConnected(qlonn_rng.normal(size=(3, 5)), Activation.IDENTITY),), (5,), 3
    )
    inputs = qlonn_rng.random((5, 1))
    noise = NoiseConfig(seed=3)
    budget = PhotonBudget.equal_split(2.0)

    batch, _, _ = forward_train(net, inputs, noise, budget, noise.stream(0))
    policy = LayerNoisePolicy.uniform(1, budget)
    vector, _ = forward_batch(net, inputs, policy, noise, noise.stream(0))

    np.testing.assert_allclose(batch, vector, rtol=1e-12, atol=1e-12)


def test_softmax_cross_entropy_gradient():
    logits = np.array([[0.0, 2.0], [0.0, 0.0]])

    loss, grad = softmax_cross_entropy(logits, np.array([0, 1]))

    expected = (np.log(2) + np.log(1 + np.exp(2))) / 2
    assert loss == pytest.approx(expected)
    np.testing.assert_allclose(grad.sum(axis=0), [0.0, 0.0], atol=1e-15)


def test_training_config_validation():
    with pytest.raises(TraitError):
        TrainingConfig(batch_size=0)
    with pytest.raises(TraitError):
        TrainingConfig(learning_rate=-1.0)


def test_training_is_deterministic(qlonn_synthetic, qlonn_event_logger):
    def _train(event_logger=None):
        noise = NoiseConfig(seed=1)
        net = NetworkSpec.dense([16, 6, 2], noise.stream())
        config = TrainingConfig(epochs=4, batch_size=3, learning_rate=0.2, seed=5)
        return train_loop(
            net,
            qlonn_synthetic,
            config,
            noise,
            PhotonBudget.equal_split(100.0),
            test_set=qlonn_synthetic,
            event_logger=event_logger,
        )

    first, history = _train(qlonn_event_logger)
    second, _ = _train()

    for a, b in zip(first.layers, second.layers):
        np.testing.assert_array_equal(a.weights, b.weights)
    assert [record.epoch for record in history] == [0, 1, 2, 3]
    assert history[-1].photons > history[0].photons > 0
    assert qlonn_event_logger.actions == ["start", "epoch", "epoch", "epoch", "epoch", "end"]
    assert {schema for schema, _ in qlonn_event_logger.events} == {QLONN_TRAINING_EVENTS_URI}


def test_noiseless_training_separates_the_synthetic_classes(qlonn_synthetic):
    noise = NoiseConfig(mode="noiseless", seed=2)
    net = NetworkSpec.dense([16, 8, 2], noise.stream())
    config = TrainingConfig(epochs=50, batch_size=4, learning_rate=0.3, seed=2)

    trained, history = train_loop(net, qlonn_synthetic, config, noise, None)

    assert history[-1].loss < history[0].loss
    assert history[-1].photons == 0.0
    assert evaluate_accuracy(trained, qlonn_synthetic) == 1.0


def test_noiseless_training_on_mnist(qlonn_mnist_mlp, qlonn_mnist):
    assert evaluate_accuracy(qlonn_mnist_mlp, qlonn_mnist) >= 0.95
