"""Permutation-equivariant / permutation-invariant layers built from two
shared sub-matrices.

A layer acting on K view blocks uses one matrix ``S`` for the block's own
contribution and one matrix ``O`` for every other block, plus a single bias
shared by all output blocks::

    out_k = act(S @ h_k + O @ sum_{j != k} h_j + bias)

The number of trainable values is therefore independent of K, and the same
parameters can be instantiated at any scale.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine
from .errors import ShapeError


@dataclass
class SubMatrixPair:
    s_matrix: np.ndarray  # out x in
    o_matrix: np.ndarray  # out x in
    bias: np.ndarray

    kind = "pepi"

    def __post_init__(self):
        if self.s_matrix.shape != self.o_matrix.shape or self.s_matrix.ndim != 2:
            raise ShapeError(f"S {self.s_matrix.shape} and O {self.o_matrix.shape} must be equal 2-D shapes")
        if self.bias.shape != (self.s_matrix.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match output dim {self.s_matrix.shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.s_matrix.shape[1]

    @property
    def out_dim(self) -> int:
        return self.s_matrix.shape[0]

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.s_matrix, self.o_matrix, self.bias)

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "SubMatrixPair":
        return SubMatrixPair(*arrays)


@dataclass(frozen=True)
class InitSpec:
    """How to fill a fresh sub-matrix pair.

    ``zeros``; ``uniform`` (every entry in +-radius); ``fan_in`` (weights in
    +-sqrt(6/in_dim)); ``glorot`` (weights in +-sqrt(6/(in_dim+out_dim))).
    The last two use zero bias. ``o_scale`` shrinks the O bound: O sees the
    sum of K-1 neighbor blocks, so a full-size O inflates early activations
    and gradients roughly with K. Models default to ``MODEL_INIT``.
    """

    kind: str = "glorot"
    radius: float = 0.1
    o_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zeros", "uniform", "fan_in", "glorot"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if not self.o_scale >= 0:
            raise ValueError("o_scale must be non-negative")


MODEL_INIT = InitSpec("glorot", o_scale=0.1)


def new_sub_matrix_pair(in_dim: int, out_dim: int, init: InitSpec, rng: np.random.Generator,
                        dtype=np.float32) -> SubMatrixPair:
    if in_dim < 1 or out_dim < 1:
        raise ValueError(f"dimensions must be positive, got in={in_dim} out={out_dim}")
    shape = (out_dim, in_dim)
    if init.kind == "zeros":
        return SubMatrixPair(np.zeros(shape, dtype), np.zeros(shape, dtype), np.zeros(out_dim, dtype))
    if init.kind == "uniform":
        r = init.radius
        return SubMatrixPair(engine.uniform_init(shape, r, rng, dtype),
                             engine.uniform_init(shape, r * init.o_scale, rng, dtype),
                             engine.uniform_init(out_dim, r, rng, dtype))
    r = np.sqrt(6.0 / in_dim) if init.kind == "fan_in" else engine.glorot_bound(in_dim, out_dim)
    return SubMatrixPair(engine.uniform_init(shape, r, rng, dtype),
                         engine.uniform_init(shape, r * init.o_scale, rng, dtype),
                         np.zeros(out_dim, dtype))


@dataclass
class EffectiveMatrix:
    matrix: np.ndarray  # (out*K) x (in*K)
    bias: np.ndarray  # out*K

    def apply(self, blocks: np.ndarray, activation: str = "identity") -> np.ndarray:
        """Dense multiply of concatenated blocks; returns (..., K, out)."""
        k = blocks.shape[-2]
        flat = blocks.reshape(*blocks.shape[:-2], -1)
        z = flat @ self.matrix.T + self.bias
        return engine.activate(z, activation).reshape(*blocks.shape[:-2], k, -1)


def build_effective_matrix(pair: SubMatrixPair, k: int) -> EffectiveMatrix:
    """Assemble the full block matrix: S on the diagonal, O everywhere else."""
    if k < 1:
        raise ValueError(f"scale must be at least 1, got {k}")
    a, b = pair.out_dim, pair.in_dim
    m = np.zeros((a * k, b * k), dtype=pair.s_matrix.dtype)
    for i in range(k):
        for j in range(k):
            m[i * a:(i + 1) * a, j * b:(j + 1) * b] = pair.s_matrix if i == j else pair.o_matrix
    return EffectiveMatrix(m, np.tile(pair.bias, k))


def _block_sum(x: np.ndarray) -> np.ndarray:
    # ascending block order, 64-bit accumulator
    total = x[..., 0, :].astype(np.float64)
    for k in range(1, x.shape[-2]):
        total += x[..., k, :]
    return total


def pepi_layer_forward(pair: SubMatrixPair, blocks: np.ndarray, activation: str = "relu"):
    """Apply one shared-parameter layer to ``blocks`` of shape (..., K, in_dim)."""
    blocks = np.asarray(blocks)
    if blocks.ndim < 2 or blocks.shape[-1] != pair.in_dim or blocks.shape[-2] < 1:
        raise ShapeError(f"expected blocks (..., K, {pair.in_dim}), got {blocks.shape}")
    dtype = pair.s_matrix.dtype
    total = _block_sum(blocks)
    diff = pair.s_matrix - pair.o_matrix
    shared = (total @ pair.o_matrix.T.astype(np.float64)).astype(dtype)
    z = blocks @ diff.T + shared[..., None, :] + pair.bias
    return engine.activate(z, activation), (blocks, total, z, activation)


def pepi_layer_backward(pair: SubMatrixPair, cache, out_grads: np.ndarray):
    """Returns ``((dS, dO, dbias), input_grads)``."""
    h, total, z, activation = cache
    if out_grads.shape != z.shape:
        raise ShapeError(f"gradient shape {out_grads.shape} != output shape {z.shape}")
    g = engine.activation_backward(z, out_grads, activation)
    g_sum = _block_sum(g)  # (..., out)
    g64 = g.reshape(-1, g.shape[-1]).astype(np.float64)
    h64 = h.reshape(-1, h.shape[-1]).astype(np.float64)
    own = g64.T @ h64
    d_s = own
    d_o = g_sum.reshape(-1, g_sum.shape[-1]).T @ total.reshape(-1, total.shape[-1]) - own
    d_b = g64.sum(axis=0)
    dtype = pair.s_matrix.dtype
    diff = pair.s_matrix - pair.o_matrix
    d_in = g @ diff + (g_sum @ pair.o_matrix.astype(np.float64)).astype(g.dtype)[..., None, :]
    return (d_s.astype(dtype), d_o.astype(dtype), d_b.astype(dtype)), d_in


def pi_readout(blocks: np.ndarray, target_index: int) -> np.ndarray:
    k = blocks.shape[-2]
    if not 0 <= target_index < k:
        raise ValueError(f"target index {target_index} out of range for {k} blocks")
    return blocks[..., target_index, :]


# ---------------------------------------------------------------------------
# Whole network


@dataclass
class ScaledModel:
    """Per-view conv encoder (weights shared by all views) followed by a
    stack of shared-parameter layers; the target block of the last layer is
    read out as class logits.

    With an empty encoder the views are taken to be feature vectors already.
    """

    encoder: list[engine.ConvLayer]
    pepi_layers: list[SubMatrixPair]
    activations: tuple[str, ...]
    scale_k: int
    target_index: int = 0
    name: str = field(default="proposed", compare=False)

    def __post_init__(self):
        if self.scale_k < 1:
            raise ValueError(f"scale must be at least 1, got {self.scale_k}")
        if not 0 <= self.target_index < self.scale_k:
            raise ValueError(f"target index {self.target_index} out of range for scale {self.scale_k}")
        if len(self.activations) != len(self.pepi_layers):
            raise ValueError("one activation per layer required")
        for prev, nxt in zip(self.pepi_layers, self.pepi_layers[1:]):
            if nxt.in_dim != prev.out_dim:
                raise ShapeError(f"layer input {nxt.in_dim} does not match previous output {prev.out_dim}")
        for prev, nxt in zip(self.encoder, self.encoder[1:]):
            if nxt.kernels.shape[1] != prev.kernels.shape[0]:
                raise ShapeError("encoder channel counts do not chain")

    @property
    def layers(self) -> list:
        return [*self.encoder, *self.pepi_layers]

    def params(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.arrays]

    def with_layers(self, layers: Sequence) -> "ScaledModel":
        n = len(self.encoder)
        return dataclasses.replace(self, encoder=list(layers[:n]), pepi_layers=list(layers[n:]))

    def with_params(self, params: Sequence[np.ndarray]) -> "ScaledModel":
        layers, i = [], 0
        for layer in self.layers:
            n = len(layer.arrays)
            layers.append(layer.with_arrays(params[i:i + n]))
            i += n
        return self.with_layers(layers)

    # forward / backward -------------------------------------------------

    def _encode(self, views: np.ndarray):
        b, k = views.shape[:2]
        if not self.encoder:
            return views.reshape(b, k, -1), []
        x = views.reshape(b * k, 1, *views.shape[2:])
        caches = []
        for layer in self.encoder:
            x, c = engine.conv_block_apply(layer.kernels, layer.bias, x)
            caches.append(c)
        return x.reshape(b, k, -1), caches

    def forward_blocks(self, views: np.ndarray):
        """All K output blocks of the last layer, shape (B, K, classes)."""
        views = np.asarray(views)
        if views.shape[1] != self.scale_k:
            raise ShapeError(f"model at scale {self.scale_k} received {views.shape[1]} views")
        h, enc_caches = self._encode(views)
        caches = []
        for pair, act in zip(self.pepi_layers, self.activations):
            h, c = pepi_layer_forward(pair, h, act)
            caches.append(c)
        return h, (views.shape, enc_caches, caches)

    def logits(self, views: np.ndarray) -> np.ndarray:
        blocks, _ = self.forward_blocks(views)
        return pi_readout(blocks, self.target_index)

    def loss_and_grads(self, views: np.ndarray, labels: np.ndarray):
        blocks, (shape, enc_caches, caches) = self.forward_blocks(views)
        loss, probs, dlogits = engine.softmax_cross_entropy(pi_readout(blocks, self.target_index), labels)
        g = np.zeros_like(blocks)
        g[:, self.target_index, :] = dlogits
        pepi_grads = []
        for pair, cache in zip(reversed(self.pepi_layers), reversed(caches)):
            pg, g = pepi_layer_backward(pair, cache, g)
            pepi_grads.append(pg)
        enc_grads = []
        if self.encoder:
            b, k = shape[:2]
            g = g.reshape(b * k, *_encoded_shape(enc_caches[-1]))
            for layer, cache in zip(reversed(self.encoder), reversed(enc_caches)):
                dk, db, g = engine.conv_block_backward(layer.kernels, cache, g)
                enc_grads.append((dk, db))
        grads = [a for pair in reversed(enc_grads) for a in pair]
        grads += [a for triple in reversed(pepi_grads) for a in triple]
        return loss, grads


def _encoded_shape(block_cache) -> tuple[int, ...]:
    pooled = block_cache[2]
    return pooled.shape[1:]


def new_scaled_model(in_shape: tuple[int, ...], conv_channels: Sequence[int], widths: Sequence[int], scale_k: int,
                     rng: np.random.Generator, init: InitSpec = MODEL_INIT, dtype=np.float32) -> ScaledModel:
    """``in_shape`` is (H, W) for image views; without conv blocks any view
    shape is flattened.
    ``widths`` lists per-block output widths; the last one is the class count."""
    encoder = []
    if conv_channels:
        h, w = in_shape
        c = 1
        for f in conv_channels:
            encoder.append(engine.new_conv_layer(c, f, rng, dtype))
            _, _, h, w = engine.conv_output_shape(h, w)
            if h < 1 or w < 1:
                raise ShapeError(f"input {in_shape} too small for {len(conv_channels)} conv blocks")
            c = f
        feat = c * h * w
    else:
        feat = int(np.prod(in_shape))
    layers = []
    for width in widths:
        layers.append(new_sub_matrix_pair(feat, width, init, rng, dtype))
        feat = width
    acts = tuple(["relu"] * (len(widths) - 1) + ["identity"])
    return ScaledModel(encoder, layers, acts, scale_k)


def rescale(model: ScaledModel, new_k: int) -> ScaledModel:
    """Same parameters, different number of view blocks."""
    if new_k < 1:
        raise ValueError(f"scale must be at least 1, got {new_k}")
    if new_k == model.scale_k:
        return model
    return dataclasses.replace(model, scale_k=new_k, target_index=min(model.target_index, new_k - 1))


@dataclass(frozen=True)
class ParamCountReport:
    trainable: int  # pepi weights + pepi biases + encoder
    effective: int  # effective-matrix weight entries + encoder
    ratio: float
    trainable_weights: int
    effective_weights: int
    encoder: int

    @property
    def weight_ratio(self) -> float:
        return self.effective_weights / self.trainable_weights


def encoder_size(encoder: Sequence[engine.ConvLayer]) -> int:
    return sum(a.size for layer in encoder for a in layer.arrays)


def count_parameters(model: ScaledModel, k: int | None = None) -> ParamCountReport:
    k = model.scale_k if k is None else k
    if k < 1:
        raise ValueError("scale must be at least 1")
    weights = sum(2 * p.out_dim * p.in_dim for p in model.pepi_layers)
    biases = sum(p.out_dim for p in model.pepi_layers)
    eff = sum(p.out_dim * p.in_dim * k * k for p in model.pepi_layers)
    enc = encoder_size(model.encoder)
    trainable = weights + biases + enc
    return ParamCountReport(trainable, eff + enc, (eff + enc) / trainable, weights, eff, enc)
