"""
Small per-pixel classifier: same-padded convolutions, ReLU, 1x1 classifier head
Parameters live in one flat vector theta; gradients are exact reverse mode
"""

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from models import InvalidInputError, LabelMap, ScoreMap


@dataclass(frozen=True)
class NetConfig:
    """
    Args:
        in_channels: image channels
        channels: output channels of each hidden layer
        kernel_sizes: odd kernel size of each hidden layer
        num_labels: L+1 outputs of the 1x1 classifier
        nonlinearity: only 'relu' is supported
        seed: initialisation seed
    """
    in_channels: int = 3
    channels: Tuple[int, ...] = (16, 16)
    kernel_sizes: Tuple[int, ...] = (3, 3)
    num_labels: int = 6
    nonlinearity: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if len(self.channels) != len(self.kernel_sizes):
            raise InvalidInputError("net.channels and net.kernel_sizes must have the same length")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise InvalidInputError(f"Kernel sizes must be odd, got {self.kernel_sizes}")
        if any(c < 1 for c in self.channels) or self.in_channels < 1 or self.num_labels < 1:
            raise InvalidInputError("Channel and label counts must be positive")
        if self.nonlinearity != "relu":
            raise InvalidInputError(f"Unsupported nonlinearity '{self.nonlinearity}'")

    def layer_shapes(self) -> List[Tuple[int, int, int]]:
        """(out_channels, in_channels, kernel) per layer, classifier last"""
        shapes = []
        previous = self.in_channels
        for out, kernel in zip(self.channels, self.kernel_sizes):
            shapes.append((out, previous, kernel))
            previous = out
        shapes.append((self.num_labels, previous, 1))
        return shapes

    @property
    def max_kernel(self) -> int:
        return max(self.kernel_sizes, default=1)


@dataclass(frozen=True)
class LayerSlot:
    """Where one layer's weights and bias sit inside theta"""
    weight: slice
    weight_shape: Tuple[int, int, int, int]
    bias: slice


def layer_table(config: NetConfig) -> List[LayerSlot]:
    table = []
    offset = 0
    for out, inp, kernel in config.layer_shapes():
        size = out * inp * kernel * kernel
        weight = slice(offset, offset + size)
        bias = slice(offset + size, offset + size + out)
        table.append(LayerSlot(weight, (out, inp, kernel, kernel), bias))
        offset = bias.stop
    return table


def parameter_count(config: NetConfig) -> int:
    return layer_table(config)[-1].bias.stop


@dataclass(frozen=True, eq=False)
class NetParams:
    """Flat parameter vector theta plus the config that gives it structure"""
    config: NetConfig
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64, copy=True).ravel()
        if theta.size != parameter_count(self.config):
            raise InvalidInputError(
                f"Expected {parameter_count(self.config)} parameters, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise InvalidInputError("Network parameters must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(self.theta[slot.weight].reshape(slot.weight_shape), self.theta[slot.bias])
                for slot in layer_table(self.config)]


def _init_layer(theta: np.ndarray, slot: LayerSlot, rng: np.random.Generator):
    _, inp, kernel, _ = slot.weight_shape
    limit = np.sqrt(6.0 / (inp * kernel * kernel))
    theta[slot.weight] = rng.uniform(-limit, limit, size=slot.weight.stop - slot.weight.start)
    theta[slot.bias] = 0.0


def init_params(config: NetConfig) -> NetParams:
    """He-style fan-in scaled uniform weights, zero biases"""
    rng = np.random.default_rng(config.seed)
    theta = np.zeros(parameter_count(config))
    for slot in layer_table(config):
        _init_layer(theta, slot, rng)
    return NetParams(config, theta)


def replace_classifier(params: NetParams, num_labels: int, seed: int = 0) -> NetParams:
    """Keep the feature layers, re-initialise the 1x1 head for a new label space"""
    config = replace(params.config, num_labels=num_labels)
    theta = np.zeros(parameter_count(config))
    keep = layer_table(params.config)[-1].weight.start
    theta[:keep] = params.theta[:keep]
    _init_layer(theta, layer_table(config)[-1], np.random.default_rng(seed))
    return NetParams(config, theta)


def lr_multipliers(config: NetConfig, final_mult: float = 10.0) -> np.ndarray:
    """Per-entry learning-rate scale; the classifier head gets final_mult"""
    scale = np.ones(parameter_count(config))
    scale[layer_table(config)[-1].weight.start:] = final_mult
    return scale


# ==================== CONVOLUTION ====================

def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    kernel = weight.shape[-1]
    pad = kernel // 2
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    windows = sliding_window_view(padded, (kernel, kernel), axis=(0, 1))
    out = np.einsum("hwcij,ocij->hwo", windows, weight, optimize=True) + bias
    return out, windows


def _conv_backward(dout: np.ndarray, windows: np.ndarray, weight: np.ndarray,
                   input_shape: Tuple[int, int, int], need_input: bool):
    dweight = np.einsum("hwcij,hwo->ocij", windows, dout, optimize=True)
    dbias = dout.sum(axis=(0, 1))
    if not need_input:
        return None, dweight, dbias
    kernel = weight.shape[-1]
    pad = kernel // 2
    height, width, channels = input_shape
    dpadded = np.zeros((height + 2 * pad, width + 2 * pad, channels))
    for i in range(kernel):
        for j in range(kernel):
            dpadded[i:i + height, j:j + width] += dout @ weight[:, :, i, j]
    return dpadded[pad:pad + height, pad:pad + width], dweight, dbias


def _check_image(params: NetParams, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    config = params.config
    if image.ndim != 3 or image.shape[2] != config.in_channels:
        raise InvalidInputError(
            f"Expected HxWx{config.in_channels} image, got shape {image.shape}")
    if min(image.shape[:2]) < config.max_kernel:
        raise InvalidInputError(
            f"Image {image.shape[0]}x{image.shape[1]} smaller than kernel {config.max_kernel}")
    return image


def _forward(params: NetParams, image: np.ndarray):
    x = _check_image(params, image)
    caches = []
    layers = params.layers()
    for index, (weight, bias) in enumerate(layers):
        z, windows = _conv_forward(x, weight, bias)
        caches.append((x.shape, windows, z))
        x = z if index == len(layers) - 1 else np.maximum(z, 0.0)
    return x, caches


def forward(params: NetParams, image: np.ndarray) -> ScoreMap:
    """Scores f_m(l | x; theta), HxWx(L+1)"""
    scores, _ = _forward(params, image)
    return ScoreMap(scores)


def relu_pattern(params: NetParams, image: np.ndarray) -> List[np.ndarray]:
    """Active-unit masks of every hidden layer (changes mark non-differentiable points)"""
    _, caches = _forward(params, image)
    return [z > 0 for _, _, z in caches[:-1]]


def loss_and_grad(params: NetParams, image: np.ndarray, target: LabelMap,
                  ignore_mask: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """
    Mean negative log-likelihood of target over non-ignored pixels, and its gradient

    Returns:
        (loss, gradient with the same layout as theta)
    """
    scores, caches = _forward(params, image)
    height, width, num_labels = scores.shape
    if target.labels.shape != (height, width):
        raise InvalidInputError(
            f"Target {target.labels.shape} does not match image {height}x{width}")
    valid = np.ones((height, width), dtype=bool)
    if ignore_mask is not None:
        if ignore_mask.shape != (height, width):
            raise InvalidInputError("Ignore mask does not match image size")
        valid &= ~np.asarray(ignore_mask, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise InvalidInputError("Every pixel is ignored; loss undefined")

    labels = np.where(valid, target.labels, 0)
    if labels.max() >= num_labels:
        raise InvalidInputError(f"Target label {int(labels.max())} out of range for {num_labels} labels")

    shifted = scores - scores.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_prob = shifted - log_norm
    picked = np.take_along_axis(log_prob, labels[..., None], axis=-1)[..., 0]
    loss = float(-picked[valid].sum() / count)

    dout = np.exp(log_prob)
    rows, cols = np.indices((height, width))
    dout[rows, cols, labels] -= 1.0
    dout *= valid[..., None] / count

    grad = np.zeros_like(params.theta)
    table = layer_table(params.config)
    layers = params.layers()
    for index in range(len(layers) - 1, -1, -1):
        input_shape, windows, z = caches[index]
        if index < len(layers) - 1:
            dout = dout * (z > 0)
        weight, _ = layers[index]
        dinput, dweight, dbias = _conv_backward(dout, windows, weight, input_shape, index > 0)
        grad[table[index].weight] = dweight.ravel()
        grad[table[index].bias] = dbias
        dout = dinput
    return loss, grad


def sgd_update(params: NetParams, velocity: np.ndarray, grad: np.ndarray, lr: float,
               momentum: float, weight_decay: float,
               lr_scale: Optional[np.ndarray] = None) -> Tuple[NetParams, np.ndarray]:
    """
    v' = momentum * v - lr * (grad + weight_decay * theta);  theta' = theta + v'

    lr_scale multiplies lr per entry (final-layer multiplier).
    """
    theta = params.theta
    if velocity.shape != theta.shape or grad.shape != theta.shape:
        raise InvalidInputError("Velocity, gradient and parameters must have the same shape")
    step = lr if lr_scale is None else lr * lr_scale
    new_velocity = momentum * velocity - step * (grad + weight_decay * theta)
    return NetParams(params.config, theta + new_velocity), new_velocity
