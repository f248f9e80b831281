"""Sequential models, traced forward passes and input gradients.

A Model is an ordered layer stack with a declared input shape and class
count; consecutive layer shapes are validated at construction. A forward
pass can record a ForwardTrace (per-layer activations plus pooling argmax
maps), which the attribution code replays backwards.

The classifier score used everywhere downstream is the pre-softmax logit of
a class; no softmax is ever part of a backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Array, Conv2D, Flatten, Layer, Linear, MaxPool2D, ReLU, \
    conv_backward_input, pool_route_back


class StaleTraceError(RuntimeError):
    """ForwardTrace no longer matches the model it was recorded from."""


def _layer_name(index: int, layer: Layer) -> str:
    return f"layer {index} ({type(layer).__name__})"


@dataclass
class Model:
    """Ordered layer stack mapping (C, H, W) inputs to class logits."""

    layers: list[Layer]
    input_shape: tuple[int, int, int]
    n_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be (C, H, W) with positive "
                             f"extents, got {self.input_shape}")
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {self.n_classes}")
        self.validate()

    def validate(self) -> None:
        """Check that consecutive layer shapes compose and the stack ends in
        an (n_classes,) vector."""
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ValueError as exc:
                raise ValueError(f"{_layer_name(i, layer)}: {exc}") from exc
        if shape != (self.n_classes,):
            raise ValueError(
                f"model output shape {shape} does not match n_classes="
                f"{self.n_classes}; add a Flatten/Linear head")

    def layer_shapes(self) -> list[tuple]:
        """Input shape of every layer plus the final output shape."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        return shapes

    def copy(self) -> "Model":
        return Model([layer.copy() for layer in self.layers],
                     self.input_shape, self.n_classes)


@dataclass
class ForwardTrace:
    """Recorded forward pass: per-layer input/output activations, pooling
    argmax maps, final logits, and a fingerprint of the producing model."""

    model: Model
    inputs: list[Array]
    outputs: list[Array]
    pool_argmax: dict[int, Array]
    logits: Array
    checksum: float = field(repr=False, default=0.0)


def param_checksum(model: Model) -> float:
    """Cheap fingerprint of all parameters, used to detect stale traces."""
    total = 0.0
    for layer in model.layers:
        for arr in layer.params().values():
            total += float(arr.sum()) + float(np.abs(arr).sum())
    return total


def check_trace(model: Model, trace: ForwardTrace) -> None:
    if trace.model is not model:
        raise StaleTraceError("trace was recorded from a different model object")
    if param_checksum(model) != trace.checksum:
        raise StaleTraceError("model parameters changed since the trace was recorded")


def forward_logits(model: Model, batch: Array) -> Array:
    """Logits for a (B, C, H, W) batch, without recording a trace."""
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"batch item shape {x.shape[1:]} does not match "
                         f"model input shape {model.input_shape}")
    for layer in model.layers:
        x, _ = layer.forward(x)
    if not np.isfinite(x).all():
        raise ValueError("forward pass produced non-finite logits")
    return x


def forward(model: Model, image: Array) -> tuple[Array, ForwardTrace]:
    """Run one image through the model, recording a full ForwardTrace.

    Pure function of (model, image): repeated calls return bit-identical
    logits and traces.
    """
    x = np.array(image, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ValueError(f"input shape {x.shape} does not match model input "
                         f"shape {model.input_shape}")
    inputs: list[Array] = []
    outputs: list[Array] = []
    pool_argmax: dict[int, Array] = {}
    b = x[None]
    for i, layer in enumerate(model.layers):
        inputs.append(b[0])
        b, ctx = layer.forward(b)
        if not np.isfinite(b).all():
            raise ValueError(f"{_layer_name(i, layer)} produced non-finite values")
        outputs.append(b[0])
        if isinstance(layer, MaxPool2D):
            pool_argmax[i] = ctx["argmax"][0]
    logits = outputs[-1] if model.layers else x
    return logits, ForwardTrace(model=model, inputs=inputs, outputs=outputs,
                                pool_argmax=pool_argmax, logits=logits,
                                checksum=param_checksum(model))


def predict(model: Model, image: Array) -> int:
    """Index of the highest logit; ties break to the lowest index."""
    logits = forward_logits(model, np.asarray(image, dtype=np.float64)[None])[0]
    return int(np.argmax(logits))


def gradient_input(model: Model, trace: ForwardTrace, class_index: int) -> Array:
    """Gradient of the class logit w.r.t. the input image.

    Standard backpropagation: pooling routes to the recorded argmax, the
    rectifier multiplies by the indicator of a positive pre-activation, and
    convolutions apply the transposed filters.
    """
    check_trace(model, trace)
    if not 0 <= class_index < model.n_classes:
        raise ValueError(f"class index {class_index} out of range "
                         f"[0, {model.n_classes})")
    g = np.zeros((1, model.n_classes))
    g[0, class_index] = 1.0
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        if isinstance(layer, Linear):
            g = g @ layer.weights
        elif isinstance(layer, Conv2D):
            g = conv_backward_input(g, layer.filters, layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            g = g * (trace.inputs[i][None] > 0)
        elif isinstance(layer, MaxPool2D):
            g = pool_route_back(g, trace.pool_argmax[i][None], layer.window,
                                (1,) + trace.inputs[i].shape)
        elif isinstance(layer, Flatten):
            g = g.reshape((1,) + trace.inputs[i].shape)
        else:
            raise ValueError(f"{_layer_name(i, layer)}: unsupported layer type")
    return g[0]
