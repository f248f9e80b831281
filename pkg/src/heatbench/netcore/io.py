"""Versioned binary model container.

Layout (all integers little-endian uint32 unless noted):

    magic    4 bytes  b"HBM1" (format name + version digit)
    header   C, H, W (input shape), n_classes, n_layers
    layers   repeated: 1-byte type tag, then a per-type shape header and
             raw float64 little-endian parameters, row-major

Type tags: 1=Linear (n_out, n_in; weights, bias), 2=Conv2D (c_out, c_in,
kh, kw, stride, padding; filters, bias), 3=MaxPool2D (window, stride),
4=ReLU, 5=Flatten.

Round-trips are bit-exact; loading validates layer shape composition and
reports the failing layer index.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .layers import Conv2D, Flatten, Layer, Linear, MaxPool2D, ReLU
from .model import Model

MAGIC = b"HBM1"

_TAGS = {Linear: 1, Conv2D: 2, MaxPool2D: 3, ReLU: 4, Flatten: 5}


class ModelIOError(Exception):
    """Base class for model container errors."""


class ModelFormatError(ModelIOError):
    """Not a model container (bad magic or malformed structure)."""


class ModelVersionError(ModelIOError):
    """Recognized container with an unsupported version."""


class TruncatedModelError(ModelIOError):
    """File ended before the declared content was read."""


class ModelValidationError(ModelIOError):
    """Container parsed but declares inconsistent layer shapes."""


def _write_u32(f: BinaryIO, *values: int) -> None:
    f.write(struct.pack("<" + "I" * len(values), *values))


def _write_f64(f: BinaryIO, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_model(model: Model, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        _write_u32(f, *model.input_shape, model.n_classes, len(model.layers))
        for layer in model.layers:
            f.write(struct.pack("B", _TAGS[type(layer)]))
            if isinstance(layer, Linear):
                _write_u32(f, *layer.weights.shape)
                _write_f64(f, layer.weights)
                _write_f64(f, layer.bias)
            elif isinstance(layer, Conv2D):
                _write_u32(f, *layer.filters.shape, layer.stride, layer.padding)
                _write_f64(f, layer.filters)
                _write_f64(f, layer.bias)
            elif isinstance(layer, MaxPool2D):
                _write_u32(f, layer.window, layer.stride)


class _Reader:
    def __init__(self, f: BinaryIO, path: str):
        self.f = f
        self.path = path
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        data = self.f.read(n)
        if len(data) != n:
            raise TruncatedModelError(
                f"{self.path}: truncated while reading {what} at offset "
                f"{self.offset} (wanted {n} bytes, got {len(data)})")
        self.offset += n
        return data

    def u32(self, count: int, what: str) -> tuple[int, ...]:
        return struct.unpack("<" + "I" * count, self.read(4 * count, what))

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.read(8 * count, what), dtype="<f8").copy()


def load_model(path: str | Path) -> Model:
    path = str(path)
    with open(path, "rb") as f:
        r = _Reader(f, path)
        magic = r.read(4, "magic")
        if magic != MAGIC:
            if magic[:3] == MAGIC[:3]:
                raise ModelVersionError(
                    f"{path}: unsupported container version {magic!r} "
                    f"(expected {MAGIC!r})")
            raise ModelFormatError(f"{path}: bad magic {magic!r}, not a model file")
        c, h, w, n_classes, n_layers = r.u32(5, "header")
        layers: list[Layer] = []
        for i in range(n_layers):
            tag = r.read(1, f"layer {i} tag")[0]
            try:
                if tag == 1:
                    n_out, n_in = r.u32(2, f"layer {i} shape")
                    weights = r.f64(n_out * n_in, f"layer {i} weights").reshape(n_out, n_in)
                    bias = r.f64(n_out, f"layer {i} bias")
                    layers.append(Linear(weights, bias))
                elif tag == 2:
                    c_out, c_in, kh, kw, stride, padding = r.u32(6, f"layer {i} shape")
                    filters = r.f64(c_out * c_in * kh * kw, f"layer {i} filters")
                    bias = r.f64(c_out, f"layer {i} bias")
                    layers.append(Conv2D(filters.reshape(c_out, c_in, kh, kw),
                                         bias, stride=stride, padding=padding))
                elif tag == 3:
                    window, stride = r.u32(2, f"layer {i} shape")
                    layers.append(MaxPool2D(window, stride))
                elif tag == 4:
                    layers.append(ReLU())
                elif tag == 5:
                    layers.append(Flatten())
                else:
                    raise ModelFormatError(f"{path}: layer {i}: unknown type tag {tag}")
            except ValueError as exc:
                raise ModelValidationError(f"{path}: layer {i}: {exc}") from exc
        extra = f.read(1)
        if extra:
            raise ModelFormatError(f"{path}: trailing bytes after declared content")
    try:
        return Model(layers, (c, h, w), n_classes)
    except ValueError as exc:
        raise ModelValidationError(f"{path}: {exc}") from exc
