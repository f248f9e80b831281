"""Layer types for sequential feed-forward classifiers.

All arrays are float64 with a leading batch axis: feature maps are
(batch, channels, height, width), flat vectors (batch, features).
Convolution runs as an im2col matrix product; its input gradient is the
matching transposed convolution (dilate, pad, correlate with the spatially
flipped and channel-transposed filter bank), so no scatter-adds are needed.

Each layer provides:
  out_shape(in_shape)        shape propagation with validation
  forward(x) -> (y, ctx)     batched forward pass; ctx carries what the
                             backward passes need (inputs, im2col columns,
                             pooling argmax indices)
  backward_input(g, ctx)     gradient w.r.t. the layer input
  param_grads(g, ctx)        gradients w.r.t. parameters (Linear/Conv2D)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Array = np.ndarray


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> Array:
    """He-normal initialization: N(0, sqrt(2 / fan_in))."""
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _im2col(x: Array, kh: int, kw: int, stride: int) -> tuple[Array, int, int]:
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow = windows.shape[:4]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b, oh * ow, c * kh * kw), oh, ow


def conv_forward(x: Array, filters: Array, bias: Array | None,
                 stride: int = 1, padding: int = 0) -> tuple[Array, Array]:
    """Cross-correlate a (B, C_in, H, W) batch with (C_out, C_in, kh, kw)
    filters. Returns the (B, C_out, oh, ow) output and the im2col columns
    (kept for parameter gradients)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    c_out, _, kh, kw = filters.shape
    cols, oh, ow = _im2col(x, kh, kw, stride)
    out = cols @ filters.reshape(c_out, -1).T
    if bias is not None:
        out = out + bias
    y = out.transpose(0, 2, 1).reshape(x.shape[0], c_out, oh, ow)
    return y, cols


def conv_backward_input(grad_out: Array, filters: Array,
                        stride: int = 1, padding: int = 0) -> Array:
    """Gradient of conv_forward w.r.t. its input (bias plays no role).

    Implemented as a stride-1 correlation of the (dilated) output gradient
    with the flipped filters, which is exact when the forward output size is
    integral (enforced by Conv2D.out_shape).
    """
    kh, kw = filters.shape[2], filters.shape[3]
    g = grad_out
    if stride > 1:
        b, c, oh, ow = grad_out.shape
        g = np.zeros((b, c, (oh - 1) * stride + 1, (ow - 1) * stride + 1))
        g[:, :, ::stride, ::stride] = grad_out
    if kh > 1 or kw > 1:
        g = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    flipped = filters[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    y, _ = conv_forward(g, flipped, None)
    if padding:
        y = y[:, :, padding:-padding, padding:-padding]
    return y


def pool_forward(x: Array, window: int) -> tuple[Array, Array]:
    """Non-overlapping max pooling. Returns pooled values and the flat
    in-window argmax indices; ties resolve to the first (row-major) maximum."""
    b, c, h, w = x.shape
    oh, ow = h // window, w // window
    tiles = (x.reshape(b, c, oh, window, ow, window)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(b, c, oh, ow, window * window))
    argmax = tiles.argmax(axis=-1)
    pooled = np.take_along_axis(tiles, argmax[..., None], axis=-1)[..., 0]
    return pooled, argmax


def pool_route_back(signal: Array, argmax: Array, window: int,
                    in_shape: tuple) -> Array:
    """Place a (B, C, oh, ow) backward signal at the recorded argmax position
    of each pooling window; all other positions receive zero."""
    b, c, oh, ow = signal.shape
    routed = np.zeros((b, c, oh, ow, window * window))
    np.put_along_axis(routed, argmax[..., None], signal[..., None], axis=-1)
    return (routed.reshape(b, c, oh, ow, window, window)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(in_shape))


@dataclass
class Linear:
    """Fully connected layer: y = x @ weights.T + bias."""

    weights: Array  # (n_out, n_in)
    bias: Array     # (n_out,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError(f"Linear weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"Linear bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[0]} output units")

    @classmethod
    def he_init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "Linear":
        return cls(he_normal(rng, (n_out, n_in), n_in), np.zeros(n_out))

    def out_shape(self, in_shape: tuple) -> tuple:
        n_out, n_in = self.weights.shape
        if in_shape != (n_in,):
            raise ValueError(f"Linear expects input shape ({n_in},), got {in_shape}")
        return (n_out,)

    def forward(self, x: Array) -> tuple[Array, dict]:
        return x @ self.weights.T + self.bias, {"input": x}

    def backward_input(self, grad_out: Array, ctx: dict) -> Array:
        return grad_out @ self.weights

    def param_grads(self, grad_out: Array, ctx: dict) -> dict:
        return {"weights": grad_out.T @ ctx["input"], "bias": grad_out.sum(axis=0)}

    def params(self) -> dict:
        return {"weights": self.weights, "bias": self.bias}

    def copy(self) -> "Linear":
        return Linear(self.weights.copy(), self.bias.copy())


@dataclass
class Conv2D:
    """2-D convolution (cross-correlation) with explicit zero padding."""

    filters: Array  # (c_out, c_in, kh, kw)
    bias: Array     # (c_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.filters = np.asarray(self.filters, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.filters.ndim != 4:
            raise ValueError(f"Conv2D filters must be 4-D, got shape {self.filters.shape}")
        if self.bias.shape != (self.filters.shape[0],):
            raise ValueError(
                f"Conv2D bias shape {self.bias.shape} does not match "
                f"{self.filters.shape[0]} output channels")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"Conv2D stride must be >= 1 and padding >= 0, "
                             f"got stride={self.stride}, padding={self.padding}")

    @classmethod
    def he_init(cls, rng: np.random.Generator, c_in: int, c_out: int,
                kernel: int, stride: int = 1, padding: int = 0) -> "Conv2D":
        filters = he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        return cls(filters, np.zeros(c_out), stride=stride, padding=padding)

    def out_shape(self, in_shape: tuple) -> tuple:
        c_out, c_in, kh, kw = self.filters.shape
        if len(in_shape) != 3 or in_shape[0] != c_in:
            raise ValueError(
                f"Conv2D expects input shape ({c_in}, H, W), got {in_shape}")
        h = in_shape[1] + 2 * self.padding
        w = in_shape[2] + 2 * self.padding
        if h < kh or w < kw:
            raise ValueError(
                f"Conv2D kernel ({kh}x{kw}) larger than padded input ({h}x{w})")
        if (h - kh) % self.stride or (w - kw) % self.stride:
            raise ValueError(
                f"Conv2D output size not integral: padded input {h}x{w}, "
                f"kernel {kh}x{kw}, stride {self.stride}")
        return (c_out, (h - kh) // self.stride + 1, (w - kw) // self.stride + 1)

    def forward(self, x: Array) -> tuple[Array, dict]:
        y, cols = conv_forward(x, self.filters, self.bias, self.stride, self.padding)
        return y, {"cols": cols}

    def backward_input(self, grad_out: Array, ctx: dict) -> Array:
        return conv_backward_input(grad_out, self.filters, self.stride, self.padding)

    def param_grads(self, grad_out: Array, ctx: dict) -> dict:
        b = grad_out.shape[0]
        c_out = self.filters.shape[0]
        grad_mat = grad_out.transpose(0, 2, 3, 1).reshape(b, -1, c_out)
        d_filters = np.einsum("bpo,bpk->ok", grad_mat, ctx["cols"])
        return {"filters": d_filters.reshape(self.filters.shape),
                "bias": grad_out.sum(axis=(0, 2, 3))}

    def params(self) -> dict:
        return {"filters": self.filters, "bias": self.bias}

    def copy(self) -> "Conv2D":
        return Conv2D(self.filters.copy(), self.bias.copy(), self.stride, self.padding)


@dataclass
class MaxPool2D:
    """Non-overlapping max pooling; stride must equal the window so pooling
    regions tile the input exactly and unpooling stays unambiguous."""

    window: int
    stride: int

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError(f"MaxPool2D window and stride must be >= 1, "
                             f"got window={self.window}, stride={self.stride}")
        if self.stride != self.window:
            raise ValueError(
                f"MaxPool2D stride ({self.stride}) must equal window "
                f"({self.window}): pooling regions must tile the input exactly")

    def out_shape(self, in_shape: tuple) -> tuple:
        if len(in_shape) != 3:
            raise ValueError(f"MaxPool2D expects input shape (C, H, W), got {in_shape}")
        c, h, w = in_shape
        if h % self.window or w % self.window:
            raise ValueError(
                f"MaxPool2D window {self.window} does not tile input {h}x{w}")
        return (c, h // self.window, w // self.window)

    def forward(self, x: Array) -> tuple[Array, dict]:
        if x.shape[2] % self.window or x.shape[3] % self.window:
            raise ValueError(
                f"MaxPool2D window {self.window} does not tile input "
                f"{x.shape[2]}x{x.shape[3]}")
        pooled, argmax = pool_forward(x, self.window)
        return pooled, {"argmax": argmax, "in_shape": x.shape}

    def backward_input(self, grad_out: Array, ctx: dict) -> Array:
        return pool_route_back(grad_out, ctx["argmax"], self.window, ctx["in_shape"])

    def params(self) -> dict:
        return {}

    def copy(self) -> "MaxPool2D":
        return MaxPool2D(self.window, self.stride)


@dataclass
class ReLU:
    """Elementwise rectifier: y = max(0, x)."""

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: Array) -> tuple[Array, dict]:
        return np.maximum(x, 0.0), {"input": x}

    def backward_input(self, grad_out: Array, ctx: dict) -> Array:
        return grad_out * (ctx["input"] > 0)

    def params(self) -> dict:
        return {}

    def copy(self) -> "ReLU":
        return ReLU()


@dataclass
class Flatten:
    """Reshape (C, H, W) feature maps to flat vectors."""

    def out_shape(self, in_shape: tuple) -> tuple:
        return (int(np.prod(in_shape)),)

    def forward(self, x: Array) -> tuple[Array, dict]:
        return x.reshape(x.shape[0], -1), {"in_shape": x.shape}

    def backward_input(self, grad_out: Array, ctx: dict) -> Array:
        return grad_out.reshape(ctx["in_shape"])

    def params(self) -> dict:
        return {}

    def copy(self) -> "Flatten":
        return Flatten()


Layer = Union[Linear, Conv2D, MaxPool2D, ReLU, Flatten]
