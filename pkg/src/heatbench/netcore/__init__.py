"""Minimal neural-network engine: layers, traced forward passes, input
gradients, model serialization, and a plain-SGD trainer.

Tensors throughout are float64 numpy arrays; images are (C, H, W) with
values in [0, 1], batches add a leading axis.
"""

from .layers import (
    Array,
    Conv2D,
    Flatten,
    Layer,
    Linear,
    MaxPool2D,
    ReLU,
    conv_backward_input,
    conv_forward,
    he_normal,
    pool_forward,
    pool_route_back,
)
from .model import (
    ForwardTrace,
    Model,
    StaleTraceError,
    check_trace,
    forward,
    forward_logits,
    gradient_input,
    param_checksum,
    predict,
)
from .io import (
    ModelFormatError,
    ModelIOError,
    ModelValidationError,
    ModelVersionError,
    TruncatedModelError,
    load_model,
    save_model,
)
from .train import Checkpoint, TrainConfig, accuracy, make_small_cnn, train_sgd

__all__ = [
    "Array", "Conv2D", "Flatten", "Layer", "Linear", "MaxPool2D", "ReLU",
    "conv_backward_input", "conv_forward", "he_normal", "pool_forward",
    "pool_route_back",
    "ForwardTrace", "Model", "StaleTraceError", "check_trace", "forward",
    "forward_logits", "gradient_input", "param_checksum", "predict",
    "ModelFormatError", "ModelIOError", "ModelValidationError",
    "ModelVersionError", "TruncatedModelError", "load_model", "save_model",
    "Checkpoint", "TrainConfig", "accuracy", "make_small_cnn", "train_sgd",
]
