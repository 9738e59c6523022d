import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from models import InvalidInputError, LabelMap
from segmentation.net import (NetConfig, NetParams, forward, init_params,
                              layer_table, loss_and_grad, lr_multipliers,
                              parameter_count, relu_pattern, replace_classifier,
                              sgd_update)


def _head_only(num_labels=3, in_channels=3):
    return NetConfig(in_channels=in_channels, channels=(), kernel_sizes=(), num_labels=num_labels)


def _numeric_grad(params, image, target, h=1e-4):
    """Central differences; NaN where a ReLU changes state inside [theta - h, theta + h]"""
    pattern = relu_pattern(params, image)
    grad = np.full(params.theta.size, np.nan)
    for i in range(params.theta.size):
        shifted = []
        for sign in (1.0, -1.0):
            theta = params.theta.copy()
            theta[i] += sign * h
            shifted.append(NetParams(params.config, theta))
        stable = all(np.array_equal(a, b)
                     for p in shifted for a, b in zip(relu_pattern(p, image), pattern))
        if stable:
            grad[i] = (loss_and_grad(shifted[0], image, target)[0]
                       - loss_and_grad(shifted[1], image, target)[0]) / (2 * h)
    return grad


class TestNetConfig:
    def test_layer_shapes(self):
        config = NetConfig(in_channels=3, channels=(8, 4), kernel_sizes=(3, 5), num_labels=6)
        assert config.layer_shapes() == [(8, 3, 3), (4, 8, 5), (6, 4, 1)]
        assert parameter_count(config) == 8 * 27 + 8 + 4 * 8 * 25 + 4 + 6 * 4 + 6

    @pytest.mark.parametrize("kwargs", [
        {"kernel_sizes": (2, 3)}, {"channels": (4,)}, {"nonlinearity": "tanh"}, {"num_labels": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidInputError):
            NetConfig(**kwargs)


class TestForward:
    def test_identity_head(self, rng):
        config = _head_only()
        theta = np.zeros(parameter_count(config))
        slot = layer_table(config)[-1]
        theta[slot.weight] = np.eye(3).ravel()
        image = rng.uniform(size=(4, 5, 3))
        assert_allclose(forward(NetParams(config, theta), image).data, image)

    def test_output_shape(self, rng):
        config = NetConfig(channels=(5, 4), kernel_sizes=(3, 5), num_labels=7)
        scores = forward(init_params(config), rng.uniform(size=(9, 11, 3)))
        assert (scores.height, scores.width, scores.num_labels) == (9, 11, 7)

    def test_zero_weights_give_bias(self, rng):
        config = NetConfig(channels=(4,), kernel_sizes=(3,), num_labels=3)
        theta = np.zeros(parameter_count(config))
        theta[layer_table(config)[-1].bias] = (0.5, -1.0, 2.0)
        scores = forward(NetParams(config, theta), rng.uniform(size=(5, 5, 3))).data
        assert_allclose(scores, np.broadcast_to([0.5, -1.0, 2.0], scores.shape))

    def test_image_too_small(self):
        params = init_params(NetConfig(channels=(2,), kernel_sizes=(5,)))
        with pytest.raises(InvalidInputError):
            forward(params, np.zeros((3, 8, 3)))

    def test_wrong_channels(self):
        with pytest.raises(InvalidInputError):
            forward(init_params(NetConfig()), np.zeros((6, 6, 1)))

    def test_init_deterministic(self):
        assert_array_equal(init_params(NetConfig(seed=4)).theta, init_params(NetConfig(seed=4)).theta)


class TestLoss:
    def test_confident_net(self):
        config = _head_only()
        theta = np.zeros(parameter_count(config))
        theta[layer_table(config)[-1].weight] = np.eye(3).ravel()
        image = np.zeros((2, 2, 3))
        image[..., 1] = 50.0
        loss, _ = loss_and_grad(NetParams(config, theta), image, LabelMap(np.ones((2, 2), int)))
        assert loss < 1e-20

    def test_uniform_scores(self):
        config = NetConfig(channels=(3,), kernel_sizes=(3,), num_labels=21)
        params = NetParams(config, np.zeros(parameter_count(config)))
        target = LabelMap(np.arange(16).reshape(4, 4) % 21)
        loss, _ = loss_and_grad(params, np.ones((4, 4, 3)), target)
        assert loss == pytest.approx(math.log(21), abs=1e-12)

    @pytest.mark.parametrize("seed,channels,kernels,size", [
        (0, (8,), (3,), 8),
        (1, (8, 8), (3, 3), 8),
        (2, (4, 6), (5, 3), 10),
        (3, (6,), (1,), 7),
        (4, (3, 4), (3, 3), 12),
    ])
    def test_gradient_matches_finite_differences(self, seed, channels, kernels, size):
        rng = np.random.default_rng(seed)
        config = NetConfig(channels=channels, kernel_sizes=kernels, num_labels=4, seed=seed)
        params = init_params(config)
        theta = params.theta + rng.normal(scale=0.05, size=params.theta.size)
        params = NetParams(config, theta)
        image = rng.uniform(size=(size, size, 3))
        target = LabelMap(rng.integers(0, 4, size=(size, size)))
        _, grad = loss_and_grad(params, image, target)
        numeric = _numeric_grad(params, image, target)
        checked = ~np.isnan(numeric)
        assert checked.mean() > 0.9
        error = np.abs(grad[checked] - numeric[checked])
        scale = np.maximum(np.abs(grad[checked]) + np.abs(numeric[checked]), 1e-2)
        assert np.all(error / scale <= 1e-4)

    def test_ignored_pixels_do_not_matter(self, rng):
        params = init_params(NetConfig(channels=(4,), kernel_sizes=(3,), num_labels=3))
        image = rng.uniform(size=(5, 5, 3))
        ignore = np.zeros((5, 5), dtype=bool)
        ignore[:2] = True
        first = rng.integers(0, 3, size=(5, 5))
        second = first.copy()
        second[:2] = (second[:2] + 1) % 3
        loss_a, grad_a = loss_and_grad(params, image, LabelMap(first), ignore)
        loss_b, grad_b = loss_and_grad(params, image, LabelMap(second), ignore)
        assert loss_a == loss_b
        assert_array_equal(grad_a, grad_b)

    def test_all_ignored(self, rng):
        params = init_params(NetConfig(channels=(2,), kernel_sizes=(3,), num_labels=2))
        with pytest.raises(InvalidInputError):
            loss_and_grad(params, rng.uniform(size=(4, 4, 3)), LabelMap(np.zeros((4, 4), int)),
                          np.ones((4, 4), dtype=bool))

    def test_target_out_of_range(self, rng):
        params = init_params(NetConfig(channels=(2,), kernel_sizes=(3,), num_labels=2))
        with pytest.raises(InvalidInputError):
            loss_and_grad(params, rng.uniform(size=(4, 4, 3)), LabelMap(np.full((4, 4), 2)))


class TestSgd:
    def test_no_gradient_no_change(self):
        params = init_params(NetConfig(channels=(2,), kernel_sizes=(3,)))
        zeros = np.zeros_like(params.theta)
        updated, velocity = sgd_update(params, zeros, zeros, 0.1, 0.9, 0.0)
        assert_array_equal(updated.theta, params.theta)
        assert_array_equal(velocity, zeros)

    def test_momentum_arithmetic(self):
        config = _head_only()
        params = NetParams(config, np.ones(parameter_count(config)))
        zeros = np.zeros_like(params.theta)
        updated, velocity = sgd_update(params, zeros, np.full_like(zeros, 2.0), 0.1, 0.9, 0.0)
        assert_allclose(velocity, -0.2)
        assert_allclose(updated.theta, 0.8)

    def test_weight_decay_and_scale(self):
        config = _head_only()
        params = NetParams(config, np.ones(parameter_count(config)))
        zeros = np.zeros_like(params.theta)
        scale = np.full_like(zeros, 10.0)
        updated, _ = sgd_update(params, zeros, zeros, 0.01, 0.9, 0.5, scale)
        assert_allclose(updated.theta, 1.0 - 0.1 * 0.5)

    def test_shape_mismatch(self):
        params = init_params(_head_only())
        with pytest.raises(InvalidInputError):
            sgd_update(params, np.zeros(3), np.zeros_like(params.theta), 0.1, 0.9, 0.0)


class TestClassifier:
    def test_lr_multipliers(self):
        config = NetConfig(channels=(2,), kernel_sizes=(3,), num_labels=3)
        scale = lr_multipliers(config, 10.0)
        head = layer_table(config)[-1].weight.start
        assert np.all(scale[:head] == 1.0)
        assert np.all(scale[head:] == 10.0)

    def test_replace_classifier_keeps_features(self):
        params = init_params(NetConfig(channels=(4, 4), kernel_sizes=(3, 3), num_labels=6))
        replaced = replace_classifier(params, 3, seed=1)
        keep = layer_table(params.config)[-1].weight.start
        assert replaced.config.num_labels == 3
        assert_array_equal(replaced.theta[:keep], params.theta[:keep])
        assert replaced.theta.size == parameter_count(replaced.config)
