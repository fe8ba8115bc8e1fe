"""Layer primitives for the convolutional front ends.

Feature maps are laid out (batch, H, W, M): H indexes electrodes (or rows),
W indexes time and M indexes filter maps. A single epoch enters the networks
as (16, 120, 1).
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor

log = logging.getLogger(__name__)


def truncated_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Normal(0, 1/fan_in) resampled outside two standard deviations."""
    std = 1.0 / np.sqrt(max(fan_in, 1))
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _param(name, data, trainable=True) -> Parameter:
    return Parameter(name, Tensor(data, requires_grad=trainable), trainable)


# ---------------------------------------------------------------- functional


def dense(x, weights, bias=None, activation: str | None = None) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    out = ad.matmul(x, weights)
    if bias is not None:
        out = out + bias
    return activate(out, activation)


def activate(x: Tensor, kind: str | None) -> Tensor:
    if kind is None or kind == "linear":
        return x
    if kind == "relu":
        return ad.relu(x)
    if kind == "elu":
        return ad.elu(x)
    if kind == "sigmoid":
        return ad.sigmoid(x)
    if kind == "tanh":
        return ad.tanh(x)
    if kind == "softmax":
        return ad.softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


def elu(x, alpha: float = 1.0) -> Tensor:
    return ad.elu(x, alpha)


def relu(x) -> Tensor:
    return ad.relu(x)


def sigmoid(x) -> Tensor:
    return ad.sigmoid(x)


def softmax(z, axis: int = -1) -> Tensor:
    z = ad.as_tensor(z)
    if z.size == 0:
        raise ShapeError("softmax: empty input")
    return ad.softmax(z, axis)


def flatten(x) -> Tensor:
    x = ad.as_tensor(x)
    return ad.reshape(x, (x.shape[0], -1))


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = ad.as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, mask)


def batch_norm(x, gamma: Tensor, beta: Tensor, state: "BatchNorm", training: bool) -> Tensor:
    """Normalize over every axis but the last.

    Training uses batch statistics (biased variance) and folds them into the
    running averages; inference uses the running averages.
    """
    x = ad.as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    if training:
        count = int(np.prod([x.shape[a] for a in axes]))
        if count < 2:
            raise ValueError("batch_norm: need at least two values per map in training mode")
        out, mu, var = ad.batch_norm_train(x, gamma, beta, state.eps)
        m = state.momentum
        state.running_mean.tensor.data = m * state.running_mean.data + (1 - m) * mu
        state.running_var.tensor.data = m * state.running_var.data + (1 - m) * var
        state.updates += 1
        return out
    else:
        if state.updates == 0 and not state.warned:
            log.warning("batch norm %s used for inference before any training step", state.name)
            state.warned = True
        inv = 1.0 / np.sqrt(state.running_var.data + state.eps)
        xhat = (x - state.running_mean.data) * inv
    return xhat * gamma + beta


def conv2d(x, kernels, bias=None, padding: str = "valid") -> Tensor:
    return ad.conv2d(x, kernels, bias, padding)


def depthwise_conv2d(x, kernels, depth_multiplier: int | None = None, padding: str = "valid") -> Tensor:
    kernels = ad.as_tensor(kernels)
    mult = kernels.shape[3] if depth_multiplier is None else depth_multiplier
    if mult < 1:
        raise ValueError(f"depth multiplier must be >= 1, got {mult}")
    if kernels.shape[3] != mult:
        raise ShapeError(f"kernel {kernels.shape} does not carry depth multiplier {mult}")
    return ad.depthwise_conv2d(x, kernels, padding)


def separable_conv2d(x, depthwise_kernels, pointwise_kernels, bias=None) -> Tensor:
    pointwise_kernels = ad.as_tensor(pointwise_kernels)
    if pointwise_kernels.shape[:2] != (1, 1):
        raise ShapeError(f"pointwise kernel must be 1x1, got {pointwise_kernels.shape}")
    mid = ad.depthwise_conv2d(x, depthwise_kernels, "same")
    return ad.conv2d(mid, pointwise_kernels, bias, "valid")


def avg_pool2d(x, window) -> Tensor:
    return ad.avg_pool2d(x, tuple(window))


def cross_entropy(logits: Tensor, labels: np.ndarray, class_weights=None) -> Tensor:
    """Mean (optionally class-weighted) categorical cross-entropy in nats."""
    labels = np.asarray(labels, dtype=int)
    logp = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=float)[labels]
        onehot *= w[:, None]
        norm = w.sum()
    else:
        norm = float(len(labels))
    return ad.reduce_sum(logp * onehot) * (-1.0 / norm)


# ---------------------------------------------------------------- stateful layers


class Layer:
    name: str = ""

    def params(self) -> list[Parameter]:
        return []

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, name, in_maps, filters, kernel, rng, padding="valid", use_bias=True):
        self.name = name
        self.padding = padding
        fan_in = kernel[0] * kernel[1] * in_maps
        self.kernel = _param(f"{name}.kernel", truncated_normal(rng, (*kernel, in_maps, filters), fan_in))
        self.bias = _param(f"{name}.bias", np.zeros(filters)) if use_bias else None

    def params(self):
        return [self.kernel] + ([self.bias] if self.bias else [])

    def __call__(self, x, training=False):
        b = self.bias.tensor if self.bias else None
        return conv2d(x, self.kernel.tensor, b, self.padding)


class DepthwiseConv2D(Layer):
    def __init__(self, name, in_maps, kernel, depth_multiplier, rng, padding="valid"):
        if depth_multiplier < 1:
            raise ValueError(f"depth multiplier must be >= 1, got {depth_multiplier}")
        self.name = name
        self.padding = padding
        self.multiplier = depth_multiplier
        self.kernel = _param(
            f"{name}.kernel",
            truncated_normal(rng, (*kernel, in_maps, depth_multiplier), kernel[0] * kernel[1]),
        )

    def params(self):
        return [self.kernel]

    def __call__(self, x, training=False):
        return depthwise_conv2d(x, self.kernel.tensor, self.multiplier, self.padding)


class SeparableConv2D(Layer):
    """Depthwise (same padding, multiplier 1) followed by 1x1 pointwise mixing."""

    def __init__(self, name, in_maps, filters, kernel, rng, use_bias=False):
        self.name = name
        self.depthwise = _param(
            f"{name}.depthwise", truncated_normal(rng, (*kernel, in_maps, 1), kernel[0] * kernel[1])
        )
        self.pointwise = _param(f"{name}.pointwise", truncated_normal(rng, (1, 1, in_maps, filters), in_maps))
        self.bias = _param(f"{name}.bias", np.zeros(filters)) if use_bias else None

    def params(self):
        return [self.depthwise, self.pointwise] + ([self.bias] if self.bias else [])

    def __call__(self, x, training=False):
        b = self.bias.tensor if self.bias else None
        return separable_conv2d(x, self.depthwise.tensor, self.pointwise.tensor, b)


class AvgPool2D(Layer):
    def __init__(self, window, name="pool"):
        self.name = name
        self.window = tuple(window)

    def __call__(self, x, training=False):
        return avg_pool2d(x, self.window)


class BatchNorm(Layer):
    def __init__(self, name, maps, momentum=0.99, eps=1e-3):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = _param(f"{name}.gamma", np.ones(maps))
        self.beta = _param(f"{name}.beta", np.zeros(maps))
        self.running_mean = _param(f"{name}.running_mean", np.zeros(maps), trainable=False)
        self.running_var = _param(f"{name}.running_var", np.ones(maps), trainable=False)
        self.updates = 0
        self.warned = False

    def params(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]

    def __call__(self, x, training=False):
        return batch_norm(x, self.gamma.tensor, self.beta.tensor, self, training)


class Activation(Layer):
    def __init__(self, kind, name="act"):
        self.name = name
        self.kind = kind

    def __call__(self, x, training=False):
        return activate(x, self.kind)


class Dropout(Layer):
    def __init__(self, p, rng, name="dropout"):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.name = name
        self.p = p
        self.rng = rng

    def __call__(self, x, training=False):
        return dropout(x, self.p, training, self.rng)


class Dense(Layer):
    def __init__(self, name, in_features, units, rng, activation=None):
        self.name = name
        self.activation = activation
        self.weights = _param(f"{name}.kernel", truncated_normal(rng, (in_features, units), in_features))
        self.bias = _param(f"{name}.bias", np.zeros(units))

    def params(self):
        return [self.weights, self.bias]

    def __call__(self, x, training=False):
        return dense(x, self.weights.tensor, self.bias.tensor, self.activation)


class Flatten(Layer):
    name = "flatten"

    def __call__(self, x, training=False):
        return flatten(x)
