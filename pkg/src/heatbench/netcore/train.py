"""Plain SGD training with periodic checkpoints.

The trainer exists to produce classifier snapshots of varying quality for
the heatmap-quality-vs-accuracy experiment: fixed learning rate, softmax
cross-entropy on the logits, no momentum, no dropout. Training is
deterministic for a given seed and never mutates the caller's model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2D, Flatten, Linear, MaxPool2D, ReLU
from .model import Model, forward_logits


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    checkpoint_interval: int | None = None  # SGD updates between checkpoints

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.checkpoint_interval is not None and self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1 when set")


@dataclass
class Checkpoint:
    model: Model
    iteration: int
    test_accuracy: float


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 512) -> float:
    """Fraction of images whose argmax logit matches the label."""
    hits = 0
    for start in range(0, len(images), batch_size):
        logits = forward_logits(model, images[start:start + batch_size])
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[start:start + batch_size]))
    return hits / len(images)


def _sgd_step(model: Model, xb: np.ndarray, yb: np.ndarray, lr: float) -> None:
    ctxs = []
    b = xb
    for layer in model.layers:
        b, ctx = layer.forward(b)
        ctxs.append(ctx)
    # softmax cross-entropy gradient on the logits, averaged over the batch
    shifted = b - b.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(yb)), yb] -= 1.0
    g = p / len(yb)
    updates = []
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        if isinstance(layer, (Linear, Conv2D)):
            updates.append((layer, layer.param_grads(g, ctxs[i])))
        if i == 0:
            break
        g = layer.backward_input(g, ctxs[i])
    for layer, grads in updates:
        for name, grad in grads.items():
            getattr(layer, name)[...] -= lr * grad


def train_sgd(model: Model, train_data, config: TrainConfig,
              eval_data=None) -> list[Checkpoint]:
    """Train a private copy of the model, returning checkpoints at iteration
    0, every `checkpoint_interval` updates, and the final iteration.

    `train_data` / `eval_data` are any objects with `images` (N, C, H, W)
    and `labels` (N,) arrays, e.g. datahub.Dataset; accuracy is measured on
    `eval_data` (the training set when absent).
    """
    images = np.asarray(train_data.images, dtype=np.float64)
    labels = np.asarray(train_data.labels)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if images.shape[1:] != model.input_shape:
        raise ValueError(f"dataset image shape {images.shape[1:]} does not "
                         f"match model input shape {model.input_shape}")
    if int(labels.max()) >= model.n_classes:
        raise ValueError(f"label {int(labels.max())} out of range for "
                         f"{model.n_classes} classes")
    eval_images = np.asarray((eval_data or train_data).images, dtype=np.float64)
    eval_labels = np.asarray((eval_data or train_data).labels)

    work = model.copy()
    checkpoints = [Checkpoint(work.copy(), 0, accuracy(work, eval_images, eval_labels))]
    rng = np.random.default_rng(config.seed)
    iteration = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), config.batch_size):
            batch = order[start:start + config.batch_size]
            _sgd_step(work, images[batch], labels[batch], config.learning_rate)
            iteration += 1
            if config.checkpoint_interval and iteration % config.checkpoint_interval == 0:
                checkpoints.append(Checkpoint(
                    work.copy(), iteration, accuracy(work, eval_images, eval_labels)))
    if iteration > 0 and checkpoints[-1].iteration != iteration:
        checkpoints.append(Checkpoint(
            work.copy(), iteration, accuracy(work, eval_images, eval_labels)))
    return checkpoints


def make_small_cnn(input_shape: tuple[int, int, int], n_classes: int,
                   rng: np.random.Generator,
                   conv_channels: tuple[int, int] = (24, 48),
                   fc_width: int = 96) -> Model:
    """Two conv/pool blocks plus a two-layer classifier head; the default
    architecture for desk-scale experiments. Needs H and W divisible by 4."""
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ValueError(f"make_small_cnn needs H and W divisible by 4, got {h}x{w}")
    c1, c2 = conv_channels
    layers = [
        Conv2D.he_init(rng, c, c1, kernel=3, padding=1),
        ReLU(),
        MaxPool2D(2, 2),
        Conv2D.he_init(rng, c1, c2, kernel=3, padding=1),
        ReLU(),
        MaxPool2D(2, 2),
        Flatten(),
        Linear.he_init(rng, c2 * (h // 4) * (w // 4), fc_width),
        ReLU(),
        Linear.he_init(rng, fc_width, n_classes),
    ]
    return Model(layers, input_shape, n_classes)
