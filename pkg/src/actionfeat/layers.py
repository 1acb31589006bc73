"""Forward and backward kernels for the network's layer types.

Feature-map kernels take a single ``(C, H, W)`` tensor. Fully connected,
ReLU, dropout and softmax kernels also accept a ``(batch, dim)`` matrix so
the head can be trained on minibatches.

Kernels are pure. Outputs are float32 unless an input is float64, in which
case the whole computation stays in float64 (used by gradient checks).
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError
from .tensor import result_dtype

CE_EPS = 1e-12


@dataclass
class ConvParams:
    """Weights are ``(out_channels, in_channels, kernel, kernel)``."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(f"conv weights must be O x C x K x K, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv bias length {self.bias.shape} does not match {self.weights.shape[0]} kernels")
        if self.stride < 1 or self.pad < 0:
            raise ConfigError(f"invalid stride {self.stride} / pad {self.pad}")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2]


@dataclass(frozen=True)
class LrnParams:
    k: float = 2.0
    n: int = 5
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise ConfigError(f"LRN window n must be a positive odd integer, got {self.n}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("LRN alpha and beta must be non-negative")


@dataclass
class FcParams:
    """Weights are ``(out_dim, in_dim)``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ShapeError(f"fc weights must be a matrix, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"fc bias length {self.bias.shape} does not match {self.weights.shape[0]} outputs")

    @property
    def out_dim(self):
        return self.weights.shape[0]

    @property
    def in_dim(self):
        return self.weights.shape[1]


def conv_output_size(size, kernel, stride, pad):
    padded = size + 2 * pad
    if padded < kernel:
        raise ShapeError(f"kernel {kernel} larger than padded input {padded}")
    return (padded - kernel) // stride + 1


def pool_output_size(size, kernel, stride):
    if size < kernel:
        raise ShapeError(f"pool window {kernel} exceeds spatial size {size}")
    return (size - kernel) // stride + 1


def conv_forward(x, p):
    """Cross-correlate ``x`` (C, H, W) with every kernel in ``p``.

    Computed as a single matrix product over unrolled patches, accumulating
    in float64.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv input must be C x H x W, got {x.shape}")
    c, h, w = x.shape
    if c != p.in_channels:
        raise ConfigError(f"conv expects {p.in_channels} input channels, got {c}")
    k, s, pad = p.kernel, p.stride, p.pad
    ho = conv_output_size(h, k, s, pad)
    wo = conv_output_size(w, k, s, pad)

    xp = np.pad(x.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * k * k)
    wmat = p.weights.reshape(p.out_channels, -1).astype(np.float64)
    out = wmat @ cols.T + p.bias.astype(np.float64)[:, None]
    return out.reshape(p.out_channels, ho, wo).astype(result_dtype(x, p.weights))


def relu_forward(x):
    return np.where(x > 0, x, np.zeros((), dtype=x.dtype))


def relu_backward(x, upstream):
    if x.shape != upstream.shape:
        raise ShapeError(f"relu_backward shape mismatch {x.shape} vs {upstream.shape}")
    return np.where(x > 0, upstream, np.zeros((), dtype=upstream.dtype))


def maxpool_forward(x, kernel, stride):
    if x.ndim != 3:
        raise ShapeError(f"pool input must be C x H x W, got {x.shape}")
    _, h, w = x.shape
    ho = pool_output_size(h, kernel, stride)
    wo = pool_output_size(w, kernel, stride)
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    return win[:, :ho, :wo].max(axis=(3, 4))


def lrn_forward(x, p):
    """Cross-channel local response normalization.

    At each pixel, channel ``i`` is divided by
    ``(k + alpha * sum_j a_j**2) ** beta`` where ``j`` ranges over
    ``max(0, i - n//2) .. min(N - 1, i + n//2)``.
    """
    if x.ndim != 3:
        raise ShapeError(f"LRN input must be N x H x W, got {x.shape}")
    a = x.astype(np.float64)
    sq = a * a
    n_ch = a.shape[0]
    half = p.n // 2
    window = np.zeros_like(sq)
    for d in range(-half, half + 1):
        lo, hi = max(0, -d), min(n_ch, n_ch - d)
        if lo < hi:
            window[lo:hi] += sq[lo + d:hi + d]
    base = p.k + p.alpha * window
    if not np.all(base > 0):
        raise NumericError("LRN denominator is not positive")
    return (a / base ** p.beta).astype(result_dtype(x))


def fc_forward(x, p):
    """``weights @ x + bias`` for a vector, or row-wise for a batch matrix."""
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"fc expects input length {p.in_dim}, got {x.shape[-1]}")
    dtype = result_dtype(x, p.weights)
    return (x.astype(dtype, copy=False) @ p.weights.T.astype(dtype, copy=False)
            + p.bias.astype(dtype, copy=False))


def fc_backward(x, p, upstream):
    """Return ``(grad_x, grad_w, grad_b)``; batch gradients are summed over rows."""
    if x.shape[-1] != p.in_dim or upstream.shape[-1] != p.out_dim:
        raise ShapeError("fc_backward dimension mismatch")
    if x.ndim != upstream.ndim or (x.ndim == 2 and x.shape[0] != upstream.shape[0]):
        raise ShapeError("fc_backward batch mismatch")
    dtype = result_dtype(x, p.weights, upstream)
    x = x.astype(dtype, copy=False)
    up = upstream.astype(dtype, copy=False)
    grad_x = up @ p.weights.astype(dtype, copy=False)
    if x.ndim == 1:
        grad_w = np.outer(up, x)
        grad_b = up.copy()
    else:
        grad_w = up.T @ x
        grad_b = up.sum(axis=0)
    return grad_x, grad_w, grad_b


def dropout_forward(x, rate, train, rng=None):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is boolean."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x.copy(), np.ones(x.shape, dtype=bool)
    mask = rng.random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    return np.where(mask, x * scale, np.zeros((), dtype=x.dtype)), mask


def dropout_backward(upstream, mask, rate):
    scale = upstream.dtype.type(1.0 / (1.0 - rate))
    return np.where(mask, upstream * scale, np.zeros((), dtype=upstream.dtype))


def softmax(x):
    """Softmax over the last axis with max subtraction."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label):
    """Loss ``-ln(p[label] + eps)`` and its gradient w.r.t. the pre-softmax logits.

    For a batch, ``label`` is an int array; the returned loss is the mean and
    the gradient is already divided by the batch size.
    """
    n = probs.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if np.any(labels < 0) or np.any(labels >= n):
        raise ConfigError(f"label {label} out of range for {n} classes")
    if probs.ndim == 1:
        loss = -float(np.log(probs[int(label)] + CE_EPS))
        grad = probs.copy()
        grad[int(label)] -= 1
        return loss, grad
    rows = np.arange(probs.shape[0])
    loss = -float(np.mean(np.log(probs[rows, labels] + CE_EPS)))
    grad = probs.copy()
    grad[rows, labels] -= 1
    return loss, grad / probs.shape[0]
