"""Small numpy neural-network engine: dense and conv layers, max pooling,
softmax cross-entropy, SGD with per-epoch learning-rate decay and a
central finite-difference gradient checker.

All layer functions are pure. Forward calls return ``(output, cache)`` and
the matching backward consumes that cache.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

KERNEL = 5
POOL = 2

ACTIVATIONS = ("relu", "identity")


def _check_activation(activation: str) -> None:
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    _check_activation(activation)
    if activation == "relu":
        return np.maximum(z, 0)
    return z


def activation_backward(z: np.ndarray, grad: np.ndarray, activation: str) -> np.ndarray:
    _check_activation(activation)
    if activation == "relu":
        return np.where(z > 0, grad, 0).astype(grad.dtype, copy=False)
    return grad


# ---------------------------------------------------------------------------
# Parameter containers


@dataclass
class DenseLayer:
    weights: np.ndarray  # out x in
    bias: np.ndarray

    kind = "dense"

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.weights, self.bias)

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "DenseLayer":
        return DenseLayer(*arrays)


@dataclass
class ConvLayer:
    kernels: np.ndarray  # filters x channels x 5 x 5
    bias: np.ndarray

    kind = "conv"

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.kernels, self.bias)

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ConvLayer":
        return ConvLayer(*arrays)


def uniform_init(shape, bound: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def new_dense_layer(in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32) -> DenseLayer:
    if in_dim < 1 or out_dim < 1:
        raise ValueError("layer dimensions must be positive")
    bound = glorot_bound(in_dim, out_dim)
    return DenseLayer(uniform_init((out_dim, in_dim), bound, rng, dtype), np.zeros(out_dim, dtype=dtype))


def new_conv_layer(in_channels: int, filters: int, rng: np.random.Generator, dtype=np.float32) -> ConvLayer:
    if in_channels < 1 or filters < 1:
        raise ValueError("channel counts must be positive")
    bound = glorot_bound(in_channels * KERNEL * KERNEL, filters * KERNEL * KERNEL)
    kernels = uniform_init((filters, in_channels, KERNEL, KERNEL), bound, rng, dtype)
    return ConvLayer(kernels, np.zeros(filters, dtype=dtype))


# ---------------------------------------------------------------------------
# Dense


def dense_apply(weights: np.ndarray, bias: np.ndarray, x: np.ndarray, activation: str = "identity"):
    """``activation(W @ x + b)`` over the last axis of ``x``."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(
            f"dense layer {weights.shape} with bias {bias.shape} cannot take input {x.shape}"
        )
    z = x @ weights.T + bias
    return activate(z, activation), (x, z, activation)


def dense_backward(weights: np.ndarray, cache, out_grad: np.ndarray):
    x, z, activation = cache
    if out_grad.shape != z.shape:
        raise ShapeError(f"gradient shape {out_grad.shape} != output shape {z.shape}")
    g = activation_backward(z, out_grad, activation)
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    dw = (g2.T @ x2).astype(weights.dtype, copy=False)
    db = g2.sum(axis=0).astype(weights.dtype, copy=False)
    dx = g @ weights
    return dw, db, dx


# ---------------------------------------------------------------------------
# Convolution + pooling


def conv_output_shape(height: int, width: int) -> tuple[int, int, int, int]:
    """(conv_h, conv_w, pooled_h, pooled_w) for a valid 5x5 conv then 2x2/2 pool."""
    ch, cw = height - KERNEL + 1, width - KERNEL + 1
    return ch, cw, ch // POOL, cw // POOL


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray):
    """Valid cross-correlation, stride 1. ``x`` is (N, C, H, W)."""
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv kernels {kernels.shape} cannot take input {x.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernels.shape
    if h < kh or w < kw:
        raise ShapeError(f"spatial size {h}x{w} smaller than kernel {kh}x{kw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv bias {bias.shape} does not match {f} filters")
    ho, wo = h - kh + 1, w - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n c ho wo kh kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ kernels.reshape(f, -1).T + bias
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    return out, (cols, x.shape)


def conv2d_backward(kernels: np.ndarray, cache, out_grad: np.ndarray):
    cols, (n, c, h, w) = cache
    f, _, kh, kw = kernels.shape
    ho, wo = h - kh + 1, w - kw + 1
    g = out_grad.transpose(0, 2, 3, 1).reshape(-1, f)
    dk = (g.T @ cols).reshape(kernels.shape).astype(kernels.dtype, copy=False)
    db = g.sum(axis=0).astype(kernels.dtype, copy=False)
    dcols = (g @ kernels.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, c, h, w), dtype=out_grad.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dk, db, dx


def max_pool(x: np.ndarray):
    """2x2 stride-2 max pool; odd trailing rows/cols are dropped.

    Ties resolve to the first maximum in row-major order inside the window.
    """
    n, c, h, w = x.shape
    hp, wp = h // POOL, w // POOL
    if hp < 1 or wp < 1:
        raise ShapeError(f"cannot pool a {h}x{w} map")
    r = x[:, :, : hp * POOL, : wp * POOL].reshape(n, c, hp, POOL, wp, POOL)
    r = r.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp, POOL * POOL)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def max_pool_backward(cache, out_grad: np.ndarray) -> np.ndarray:
    idx, (n, c, h, w) = cache
    hp, wp = idx.shape[2], idx.shape[3]
    r = np.zeros((n, c, hp, wp, POOL * POOL), dtype=out_grad.dtype)
    np.put_along_axis(r, idx[..., None], out_grad[..., None], axis=-1)
    r = r.reshape(n, c, hp, wp, POOL, POOL).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((n, c, h, w), dtype=out_grad.dtype)
    dx[:, :, : hp * POOL, : wp * POOL] = r.reshape(n, c, hp * POOL, wp * POOL)
    return dx


def conv_block_apply(kernels: np.ndarray, bias: np.ndarray, images: np.ndarray):
    """conv 5x5 (valid) -> max pool 2x2 -> ReLU on an (N, C, H, W) stack."""
    z, conv_cache = conv2d(images, kernels, bias)
    pooled, pool_cache = max_pool(z)
    return np.maximum(pooled, 0), (conv_cache, pool_cache, pooled)


def conv_block_backward(kernels: np.ndarray, cache, out_grad: np.ndarray):
    conv_cache, pool_cache, pooled = cache
    g = np.where(pooled > 0, out_grad, 0).astype(out_grad.dtype, copy=False)
    g = max_pool_backward(pool_cache, g)
    return conv2d_backward(kernels, conv_cache, g)


# ---------------------------------------------------------------------------
# Loss


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Accepts one logit vector with a scalar label or a (B, C) batch. Returns
    ``(loss, probabilities, logit_grad)``; for a batch the gradient is that of
    the mean loss.
    """
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (z.shape[0],):
        raise ShapeError(f"{y.shape[0]} labels for {z.shape[0]} logit rows")
    classes = z.shape[1]
    if np.any(y < 0) or np.any(y >= classes):
        raise ValueError(f"label out of range for {classes} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, y]
    probs = np.exp(shifted - log_norm[:, None])
    grad = probs.copy()
    grad[rows, y] -= 1
    if single:
        return float(losses[0]), probs[0], grad[0]
    return float(losses.mean()), probs, grad / z.shape[0]


# ---------------------------------------------------------------------------
# Optimizer


@dataclass(frozen=True)
class SgdSchedule:
    base_lr: float = 0.05
    decay: float = 0.99
    epoch: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.decay <= 0 or self.epoch < 0:
            raise ValueError("learning rate, decay must be positive and epoch non-negative")

    @property
    def lr(self) -> float:
        return self.base_lr * self.decay ** self.epoch

    def at_epoch(self, epoch: int) -> "SgdSchedule":
        return SgdSchedule(self.base_lr, self.decay, epoch)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], schedule: SgdSchedule) -> list[np.ndarray]:
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    lr = schedule.lr
    out = []
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {p.shape} vs gradient {g.shape}")
        out.append((p - lr * g).astype(p.dtype, copy=False))
    return out


# ---------------------------------------------------------------------------
# Gradient checking


def numerical_gradient(f: Callable[[list[np.ndarray]], float], params: Sequence[np.ndarray], step: float) -> list[np.ndarray]:
    params = [np.array(p, dtype=np.float64) for p in params]
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for i in range(p.size):
            orig = p.flat[i]
            p.flat[i] = orig + step
            plus = f(params)
            p.flat[i] = orig - step
            minus = f(params)
            p.flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError("loss is not finite")
            g.flat[i] = (plus - minus) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def finite_diff_check(loss_fn, params: Sequence[np.ndarray], step: float = 1e-3, floor: float = 1e-6) -> float:
    """Largest elementwise relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)``. Parameters are promoted
    to float64 before probing.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    loss, analytic = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    numeric = numerical_gradient(lambda ps: loss_fn(ps)[0], params, step)
    return max((relative_error(a, n, floor) for a, n in zip(analytic, numeric)), default=0.0)
