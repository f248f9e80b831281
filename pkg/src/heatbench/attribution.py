"""Heatmap computation from a traced forward pass.

Three backward mappings turn a class logit into per-pixel scores:

* sensitivity: the plain input gradient, pooled across color channels with
  an l2 or l-infinity norm (non-negative scores, local explanations);
* deconvolution: the same unpooling and transposed-filter rules, but the
  backward signal is rectified at every ReLU layer instead of gated by the
  forward activation sign, and filtering ignores the input activations;
* LRP: layer-wise redistribution of the class logit under a conservation
  constraint, with the epsilon-stabilized rule or the alpha/beta rule that
  splits positive and negative contributions (signed scores, summed over
  color channels).

A uniform-random heatmap provides the evaluation baseline, and a small
renderer maps score grids to 8-bit images (red = positive evidence,
blue = negative).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .netcore import (
    Array,
    Conv2D,
    Flatten,
    ForwardTrace,
    Linear,
    MaxPool2D,
    Model,
    ReLU,
    check_trace,
    conv_backward_input,
    conv_forward,
    forward,
    gradient_input,
    pool_route_back,
)

#: Method names accepted by compute_heatmap and the CLI.
METHOD_NAMES = (
    "sensitivity-q2", "sensitivity-qinf",
    "deconv-q2", "deconv-qinf",
    "lrp-eps-0.01", "lrp-eps-100", "lrp-ab-2",
    "random",
)


@dataclass
class Heatmap:
    """Per-pixel scores for one explained image.

    `scores` is the (H, W) pooled grid; `signal` optionally keeps the
    (C, H, W) per-channel values before pooling. Sensitivity and
    deconvolution scores are >= 0; LRP scores are signed.
    """

    scores: Array
    method: str
    signal: Array | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError(f"heatmap scores must be 2-D, got shape {self.scores.shape}")
        if not np.isfinite(self.scores).all():
            raise ValueError("heatmap scores must be finite")


@dataclass(frozen=True)
class LrpParams:
    """Relevance-redistribution rule selector.

    rule="epsilon" uses the stabilized ratio with `epsilon >= 0`;
    rule="alphabeta" splits positive/negative contributions with weights
    alpha + beta = 1 exactly.
    """

    rule: str
    epsilon: float = 0.0
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.rule not in ("epsilon", "alphabeta"):
            raise ValueError(f"unknown LRP rule {self.rule!r}")
        if self.rule == "epsilon" and self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.rule == "alphabeta" and self.alpha + self.beta != 1.0:
            raise ValueError(
                f"alpha + beta must equal 1 exactly, got "
                f"{self.alpha} + {self.beta} = {self.alpha + self.beta}")


#: Parameterizations used in the desk-scale comparisons.
LRP_PRESETS = {
    "lrp-eps-0.01": LrpParams("epsilon", epsilon=0.01),
    "lrp-eps-100": LrpParams("epsilon", epsilon=100.0),
    "lrp-ab-2": LrpParams("alphabeta", alpha=2.0, beta=-1.0),
}


def _channel_norm(signal: Array, q: float) -> Array:
    if q == 2:
        return np.sqrt(np.sum(signal * signal, axis=0))
    if q == math.inf:
        return np.max(np.abs(signal), axis=0)
    raise ValueError(f"unsupported norm order {q!r}: use 2 or inf")


def sensitivity_heatmap(gradient: Array, q: float = 2) -> Heatmap:
    """Pool a (C, H, W) input gradient across channels with an lq norm."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.ndim != 3:
        raise ValueError(f"gradient must be (C, H, W), got shape {gradient.shape}")
    name = "sensitivity-q2" if q == 2 else "sensitivity-qinf"
    return Heatmap(_channel_norm(gradient, q), name, signal=gradient)


def deconv_signal(model: Model, trace: ForwardTrace, class_index: int) -> Array:
    """Backward signal of the deconvolution method, at the input layer.

    Seeded with a one-hot vector at the class output. Unpooling and
    filtering match gradient backpropagation; at each ReLU layer the signal
    itself is rectified, so anything entering the layer below is >= 0.
    Filtering never consults the forward activations: for networks without
    pooling the result is independent of the input image.
    """
    check_trace(model, trace)
    if not 0 <= class_index < model.n_classes:
        raise ValueError(f"class index {class_index} out of range "
                         f"[0, {model.n_classes})")
    r = np.zeros((1, model.n_classes))
    r[0, class_index] = 1.0
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        if isinstance(layer, Linear):
            r = r @ layer.weights
        elif isinstance(layer, Conv2D):
            r = conv_backward_input(r, layer.filters, layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            r = np.maximum(r, 0.0)
        elif isinstance(layer, MaxPool2D):
            r = pool_route_back(r, trace.pool_argmax[i][None], layer.window,
                                (1,) + trace.inputs[i].shape)
        elif isinstance(layer, Flatten):
            r = r.reshape((1,) + trace.inputs[i].shape)
        else:
            raise ValueError(f"layer {i} ({type(layer).__name__}): "
                             f"unsupported layer type for deconvolution")
    return r[0]


def deconv_heatmap(signal: Array, q: float = 2) -> Heatmap:
    """Pool a (C, H, W) deconvolution signal across channels (lq norm)."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 3:
        raise ValueError(f"signal must be (C, H, W), got shape {signal.shape}")
    name = "deconv-q2" if q == 2 else "deconv-qinf"
    return Heatmap(_channel_norm(signal, q), name, signal=signal)


def _redistribute_linear(r_out: Array, a: Array, weights: Array,
                         params: LrpParams) -> Array:
    # z_ij = a_i * w_ij; biases take no share, so each output unit's
    # relevance is fully handed down and layer sums are preserved.
    if params.rule == "epsilon":
        z_sum = a @ weights.T
        denom = np.where(z_sum >= 0, z_sum + params.epsilon, z_sum - params.epsilon)
        with np.errstate(divide="ignore", invalid="ignore"):
            return a * ((r_out / denom) @ weights)
    a_pos, a_neg = np.maximum(a, 0.0), np.minimum(a, 0.0)
    w_pos, w_neg = np.maximum(weights, 0.0), np.minimum(weights, 0.0)
    zp = a_pos @ w_pos.T + a_neg @ w_neg.T
    zn = a_pos @ w_neg.T + a_neg @ w_pos.T
    cp, cn = _split_coefficients(r_out, zp, zn, params)
    return (a_pos * (cp @ w_pos + cn @ w_neg)
            + a_neg * (cp @ w_neg + cn @ w_pos))


def _redistribute_conv(r_out: Array, a: Array, layer: Conv2D,
                       params: LrpParams) -> Array:
    def conv(x, filters):
        return conv_forward(x, filters, None, layer.stride, layer.padding)[0]

    def back(s, filters):
        return conv_backward_input(s, filters, layer.stride, layer.padding)

    if params.rule == "epsilon":
        z_sum = conv(a, layer.filters)
        denom = np.where(z_sum >= 0, z_sum + params.epsilon, z_sum - params.epsilon)
        with np.errstate(divide="ignore", invalid="ignore"):
            return a * back(r_out / denom, layer.filters)
    a_pos, a_neg = np.maximum(a, 0.0), np.minimum(a, 0.0)
    w_pos = np.maximum(layer.filters, 0.0)
    w_neg = np.minimum(layer.filters, 0.0)
    zp = conv(a_pos, w_pos) + conv(a_neg, w_neg)
    zn = conv(a_pos, w_neg) + conv(a_neg, w_pos)
    cp, cn = _split_coefficients(r_out, zp, zn, params)
    return (a_pos * (back(cp, w_pos) + back(cn, w_neg))
            + a_neg * (back(cp, w_neg) + back(cn, w_pos)))


def _split_coefficients(r_out: Array, zp: Array, zn: Array,
                        params: LrpParams) -> tuple[Array, Array]:
    """Per-output-unit alpha/beta weights over the positive and negative
    contribution sums. A vanished sum hands its weight to the other term so
    each unit still redistributes exactly its relevance."""
    has_p, has_n = zp != 0, zn != 0
    alpha = np.where(has_n, params.alpha, 1.0)
    beta = np.where(has_p, params.beta, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cp = np.where(has_p, alpha * r_out / np.where(has_p, zp, 1.0), 0.0)
        cn = np.where(has_n, beta * r_out / np.where(has_n, zn, 1.0), 0.0)
    return cp, cn


def lrp_relevances(model: Model, trace: ForwardTrace, class_index: int,
                   params: LrpParams) -> list[Array]:
    """Relevance at every layer boundary, input end first.

    Entry i is the relevance arriving at layer i's input; the final entry is
    the output seed (the class logit, one-hot). Pooling routes relevance to
    the recorded argmax, ReLU passes it through unchanged, and Linear/Conv2D
    redistribute proportionally to the weighted activations z_ij = a_i w_ij.
    """
    check_trace(model, trace)
    if not 0 <= class_index < model.n_classes:
        raise ValueError(f"class index {class_index} out of range "
                         f"[0, {model.n_classes})")
    seed = np.zeros((1, model.n_classes))
    seed[0, class_index] = float(trace.logits[class_index])
    boundary = [seed]
    r = seed
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        a = trace.inputs[i][None]
        if isinstance(layer, Linear):
            r = _redistribute_linear(r, a, layer.weights, params)
        elif isinstance(layer, Conv2D):
            r = _redistribute_conv(r, a, layer, params)
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, MaxPool2D):
            r = pool_route_back(r, trace.pool_argmax[i][None], layer.window,
                                (1,) + trace.inputs[i].shape)
        elif isinstance(layer, Flatten):
            r = r.reshape((1,) + trace.inputs[i].shape)
        else:
            raise ValueError(f"layer {i} ({type(layer).__name__}): "
                             f"unsupported layer type for LRP")
        if not np.isfinite(r).all():
            raise ValueError(f"layer {i} ({type(layer).__name__}): "
                             f"non-finite relevance (try epsilon > 0)")
        boundary.append(r)
    boundary.reverse()
    return [b[0] for b in boundary]


def lrp(model: Model, trace: ForwardTrace, class_index: int,
        params: LrpParams, method: str | None = None) -> Heatmap:
    """LRP heatmap: signed per-pixel relevance, summed over color channels."""
    relevance = lrp_relevances(model, trace, class_index, params)[0]
    if method is None:
        if params.rule == "epsilon":
            method = f"lrp-eps-{params.epsilon:g}"
        else:
            method = f"lrp-ab-{params.alpha:g}"
    return Heatmap(relevance.sum(axis=0), method, signal=relevance)


def random_heatmap(spatial_extent: tuple[int, int], seed: int) -> Heatmap:
    """I.i.d. uniform scores; the random-ordering evaluation baseline."""
    rng = np.random.default_rng(seed)
    return Heatmap(rng.random(tuple(spatial_extent)), "random")


def compute_heatmap(model: Model, image: Array, method: str, *,
                    seed: int = 0,
                    trace: ForwardTrace | None = None,
                    class_index: int | None = None) -> Heatmap:
    """One-call dispatch by method name, explaining the predicted label.

    A precomputed (logits, trace) pair can be supplied via `trace`;
    `class_index` overrides the predicted label when given.
    """
    if method not in METHOD_NAMES:
        raise ValueError(f"unknown method {method!r}; valid methods: "
                         f"{', '.join(METHOD_NAMES)}")
    if method == "random":
        return random_heatmap(model.input_shape[1:], seed)
    if trace is None:
        _, trace = forward(model, image)
    cls = int(np.argmax(trace.logits)) if class_index is None else class_index
    if method.startswith("sensitivity"):
        q = 2 if method.endswith("q2") else math.inf
        return sensitivity_heatmap(gradient_input(model, trace, cls), q)
    if method.startswith("deconv"):
        q = 2 if method.endswith("q2") else math.inf
        signal = deconv_signal(model, trace, cls)
        return deconv_heatmap(signal, q)
    return lrp(model, trace, cls, LRP_PRESETS[method], method=method)


def render_heatmap(heatmap: Heatmap, mode: str = "signed-diverging") -> Array:
    """Render scores to an (H, W, 3) uint8 image.

    signed-diverging: max |score| maps symmetrically to the red (positive)
    and blue (negative) poles around neutral mid-gray. magnitude: |score|
    ramps from black to white. Rendering is invariant under positive
    rescaling; an all-zero heatmap renders neutral mid-gray.
    """
    scores = heatmap.scores
    h, w = scores.shape
    if mode == "signed-diverging":
        peak = float(np.abs(scores).max())
        if peak == 0.0:
            return np.full((h, w, 3), 128, dtype=np.uint8)
        t = scores / peak
        img = np.empty((h, w, 3))
        img[..., 0] = np.where(t >= 0, 128 + 127 * t, 128 + 128 * t)
        img[..., 1] = 128 - 128 * np.abs(t)
        img[..., 2] = np.where(t >= 0, 128 - 128 * t, 128 - 127 * t)
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if mode == "magnitude":
        mag = np.abs(scores)
        peak = float(mag.max())
        if peak == 0.0:
            return np.full((h, w, 3), 128, dtype=np.uint8)
        ramp = np.rint(255 * mag / peak).astype(np.uint8)
        return np.repeat(ramp[..., None], 3, axis=2)
    raise ValueError(f"unknown render mode {mode!r}: "
                     f"use 'signed-diverging' or 'magnitude'")
