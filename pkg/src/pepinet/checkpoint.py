"""Binary checkpoints of layer parameters.

Layout (all integers unsigned 32-bit little-endian, floats IEEE-754 f32 LE)::

    b"PEPI" | version | layer count
    per layer: kind tag (u8) | dims | arrays, row-major

    conv  (tag 1): dims filters, channels, kh, kw; arrays kernels, bias
    pepi  (tag 2): dims out, in;                   arrays S, O, bias
    dense (tag 3): dims out, in;                   arrays weights, bias
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import ConvLayer, DenseLayer
from .errors import FormatError, TruncatedError, VersionError
from .pepi import SubMatrixPair

MAGIC = b"PEPI"
VERSION = 1

KIND_TAGS = {"conv": 1, "pepi": 2, "dense": 3}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
_NDIMS = {"conv": 4, "pepi": 2, "dense": 2}


def _layer_dims(layer) -> tuple[int, ...]:
    if layer.kind == "conv":
        return layer.kernels.shape
    if layer.kind == "pepi":
        return layer.s_matrix.shape
    return layer.weights.shape


def _array_shapes(kind: str, dims: tuple[int, ...]) -> list[tuple[int, ...]]:
    if kind == "conv":
        return [dims, (dims[0],)]
    if kind == "pepi":
        return [dims, dims, (dims[0],)]
    return [dims, (dims[0],)]


def _build(kind: str, arrays: list[np.ndarray]):
    if kind == "conv":
        return ConvLayer(*arrays)
    if kind == "pepi":
        return SubMatrixPair(*arrays)
    return DenseLayer(*arrays)


def dumps(layers: Sequence) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(layers))]
    for layer in layers:
        dims = _layer_dims(layer)
        parts.append(struct.pack("<B", KIND_TAGS[layer.kind]))
        parts.append(struct.pack(f"<{len(dims)}I", *dims))
        for a in layer.arrays:
            parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> list:
    view = memoryview(buf)

    def need(pos: int, n: int) -> None:
        if len(view) < pos + n:
            raise TruncatedError(f"checkpoint truncated at byte {pos} (needed {n} more)")

    need(0, 12)
    if bytes(view[:4]) != MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(view[:4])!r}")
    version, count = struct.unpack_from("<II", view, 4)
    if version > VERSION:
        raise VersionError(f"checkpoint version {version} is newer than supported {VERSION}")
    if version < 1:
        raise VersionError(f"unknown checkpoint version {version}")
    pos, layers = 12, []
    for _ in range(count):
        need(pos, 1)
        tag = view[pos]
        pos += 1
        if tag not in _TAG_KINDS:
            raise FormatError(f"unknown layer kind tag {tag}")
        kind = _TAG_KINDS[tag]
        nd = _NDIMS[kind]
        need(pos, 4 * nd)
        dims = struct.unpack_from(f"<{nd}I", view, pos)
        pos += 4 * nd
        arrays = []
        for shape in _array_shapes(kind, dims):
            size = int(np.prod(shape))
            need(pos, 4 * size)
            arrays.append(np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32))
            pos += 4 * size
        layers.append(_build(kind, arrays))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last layer")
    return layers


def save_checkpoint(layers: Sequence, path) -> None:
    Path(path).write_bytes(dumps(layers))


def load_checkpoint(path) -> list:
    return loads(Path(path).read_bytes())
