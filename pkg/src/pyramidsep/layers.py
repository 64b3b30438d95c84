"""Layers used by the CIFAR residual networks.

Convolution is lowered onto :func:`~pyramidsep.tensor.matmul_2d` through a
differentiable patch extraction (``im2col``), so the forward pass and both
backward passes share a single matrix-product path.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor, get_default_dtype, matmul_2d, reshape, transpose

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: Tensor, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    """Patch matrix of shape (c·kh·kw, n·oh·ow).

    Rows are ordered (c, kh, kw) to match a (c_out, c, kh, kw) weight reshaped
    to (c_out, c·kh·kw); columns are ordered (n, oh, ow).
    """
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"convolution output extent < 1 for input {h}x{w}, kernel {kh}x{kw}")
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]

    def _backward(g):
        g6 = g.reshape(c, kh, kw, n, oh, ow)
        dxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g6[:, i, j]
        return (dxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3),)

    return Tensor._from_op(cols.reshape(c * kh * kw, n * oh * ow), (x,), _backward, "im2col")


class Conv2dParams:
    """Bias-free 2-D convolution weights with their stride and padding."""

    def __init__(self, weight: Tensor, stride: int = 1, padding: int = 1):
        if stride < 1:
            raise ValueError(f"stride must be positive, got {stride}")
        if padding < 0:
            raise ValueError(f"padding must be non-negative, got {padding}")
        self.weight = weight
        self.stride = stride
        self.padding = padding

    @classmethod
    def create(cls, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, stride: int = 1, padding: int = 1):
        weight = Tensor(msra_init((c_out, c_in, kernel, kernel), rng), requires_grad=True)
        return cls(weight, stride=stride, padding=padding)

    def parameters(self):
        return {"weight": self.weight}


def conv2d_forward(x: Tensor, p: Conv2dParams) -> Tensor:
    c_out, c_in, kh, kw = p.weight.shape
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {c_in}")
    n, _, h, w = x.shape
    oh = conv_output_size(h, kh, p.stride, p.padding)
    ow = conv_output_size(w, kw, p.stride, p.padding)
    cols = im2col(x, kh, kw, p.stride, p.padding)
    out = matmul_2d(reshape(p.weight, (c_out, c_in * kh * kw)), cols)
    return transpose(reshape(out, (c_out, n, oh, ow)), (1, 0, 2, 3))


class BatchNormParams:
    """Per-channel affine batch normalization with running statistics.

    ``training`` selects batch statistics; ``frozen`` forces running statistics
    even while the rest of the network trains.
    """

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON, dtype=None):
        dtype = dtype or get_default_dtype()
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon
        self.training = True
        self.frozen = False

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batchnorm_forward(x: Tensor, p: BatchNormParams) -> Tensor:
    n, c, h, w = x.shape
    if c != p.channels:
        raise ValueError(f"batchnorm: input has {c} channels, parameters have {p.channels}")
    xd = x.data
    dt = xd.dtype
    p_gamma = p.gamma.data.copy()
    gamma = p_gamma.reshape(1, c, 1, 1)
    beta = p.beta.data.reshape(1, c, 1, 1)
    eps = dt.type(p.epsilon)
    use_batch = p.training and not p.frozen

    if use_batch:
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm: training mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3), dtype=dt)
        centered = xd - mean.reshape(1, c, 1, 1)
        var = np.square(centered).mean(axis=(0, 2, 3), dtype=dt)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
        xhat = centered
        xhat *= inv_std.reshape(1, c, 1, 1)
        mom = p.momentum
        p.running_mean[...] = (1.0 - mom) * p.running_mean + mom * mean
        p.running_var[...] = (1.0 - mom) * p.running_var + mom * var

        def _backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            # dx = gamma*inv_std * (g - mean(g) - xhat*mean(g*xhat))
            dx = g - (dbeta / dt.type(m)).reshape(1, c, 1, 1)
            dx -= xhat * (dgamma / dt.type(m)).reshape(1, c, 1, 1)
            dx *= (p_gamma * inv_std).reshape(1, c, 1, 1)
            return dx, dgamma, dbeta

    else:
        inv_std = (1.0 / np.sqrt(p.running_var.astype(dt) + eps)).astype(dt)
        xhat = (xd - p.running_mean.astype(dt).reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)

        def _backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = g * (p_gamma * inv_std).reshape(1, c, 1, 1)
            return dx, dgamma, dbeta

    out = gamma * xhat + beta
    return Tensor._from_op(out, (x, p.gamma, p.beta), _backward, "batchnorm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def avgpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x2: spatial extent {h}x{w} is not divisible by 2")
    quarter = x.dtype.type(0.25)
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)) * quarter

    def _backward(g):
        return (np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3),)

    return Tensor._from_op(out, (x,), _backward, "avgpool2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c) mean over spatial positions."""
    n, c, h, w = x.shape
    scale = x.dtype.type(1.0 / (h * w))

    def _backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).copy(),)

    return Tensor._from_op(x.data.sum(axis=(2, 3)) * scale, (x,), _backward, "global_avg_pool")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-column bias vector to an (n, k) matrix."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ValueError(f"bias_add: cannot add bias {b.shape} to {x.shape}")
    return Tensor._from_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "bias_add")


class LinearParams:
    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, in_features: int, out_features: int, rng: np.random.Generator):
        weight = Tensor(msra_init((out_features, in_features), rng), requires_grad=True)
        bias = Tensor(np.zeros(out_features), requires_grad=True)
        return cls(weight, bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


def linear(x: Tensor, p: LinearParams) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {p.weight.shape}")
    return bias_add(matmul_2d(x, transpose(p.weight, (1, 0))), p.bias)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood over the batch, shape (1, 1, 1, 1)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].sum(dtype=logits.dtype) / logits.dtype.type(n)

    def _backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g.reshape(()) / n),)

    return Tensor._from_op(np.asarray(loss).reshape(1, 1, 1, 1), (logits,), _backward, "softmax_cross_entropy")


def msra_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Gaussian weights with std sqrt(2 / fan_in), fan_in = prod(shape[1:])."""
    shape = tuple(int(s) for s in shape)
    fan_in = math.prod(shape[1:])
    if fan_in <= 0:
        raise ValueError(f"msra_init: fan_in must be positive for shape {shape}")
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(get_default_dtype())
