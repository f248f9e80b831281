"""Shared fixtures: the evaluation corpus and the trained reference model.

The acceptance experiments prefer real MNIST IDX files when available
(HEATBENCH_MNIST_DIR environment variable, or tests/data/mnist/); otherwise
they run on the bundled 8x8 handwritten-digits corpus (the NIST-derived
scikit-learn digits set, committed as IDX fixtures). Protocol knobs scale
with the corpus: the region window, the step count (same image fraction as
100 9x9 windows on 227x227) and the blur sigma (kept local relative to the
image).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from heatbench.datahub import Dataset, load_dataset
from heatbench.netcore import Checkpoint, TrainConfig, make_small_cnn, train_sgd
from heatbench.perturbeval import scaled_step_count

DATA_DIR = Path(__file__).parent / "data"


@dataclass
class Corpus:
    name: str
    train: Dataset
    test: Dataset
    window: int
    steps: int
    blur_sigma: float
    render_scale: int          # nearest-neighbor upscale for complexity runs
    train_config: TrainConfig
    accuracy_floor: float


def _find_mnist() -> Path | None:
    candidates = []
    if os.environ.get("HEATBENCH_MNIST_DIR"):
        candidates.append(Path(os.environ["HEATBENCH_MNIST_DIR"]))
    candidates.append(DATA_DIR / "mnist")
    for root in candidates:
        for suffix in ("", ".gz"):
            if (root / f"train-images-idx3-ubyte{suffix}").exists():
                return root / f"train-images-idx3-ubyte{suffix}"
    return None


def _load_corpus() -> Corpus:
    mnist = _find_mnist()
    if mnist is not None:
        train = load_dataset(mnist, "idx")
        test = load_dataset(mnist.parent / mnist.name.replace("train", "t10k"), "idx")
        return Corpus(
            name="mnist", train=train, test=test,
            window=4, steps=scaled_step_count(28, 28, 4), blur_sigma=3.0,
            render_scale=4,
            train_config=TrainConfig(learning_rate=0.06, batch_size=32,
                                     epochs=8, seed=0),
            accuracy_floor=0.98)
    train = load_dataset(DATA_DIR / "digits8x8" / "train-images-idx3-ubyte", "idx")
    test = load_dataset(DATA_DIR / "digits8x8" / "t10k-images-idx3-ubyte", "idx")
    # 8x8 images: single-pixel regions, blur kernel kept local (sigma 0.75,
    # radius ~2px) so the operator stays in the regime it probes
    return Corpus(
        name="digits8x8", train=train, test=test,
        window=1, steps=scaled_step_count(8, 8, 1), blur_sigma=0.75,
        render_scale=8,
        train_config=TrainConfig(learning_rate=0.06, batch_size=32,
                                 epochs=80, seed=0),
        accuracy_floor=0.98)


@pytest.fixture(scope="session")
def corpus() -> Corpus:
    return _load_corpus()


@pytest.fixture(scope="session")
def training_run(corpus) -> tuple[list[Checkpoint], float]:
    """One training run with six checkpoints from untrained to converged;
    shared by the acceptance experiments. Returns (checkpoints, seconds)."""
    import time

    c, h, w = corpus.train.images.shape[1:]
    model = make_small_cnn((c, h, w), corpus.train.n_classes,
                           np.random.default_rng(corpus.train_config.seed))
    batches = -(-len(corpus.train) // corpus.train_config.batch_size)
    total = batches * corpus.train_config.epochs
    cfg = TrainConfig(learning_rate=corpus.train_config.learning_rate,
                      batch_size=corpus.train_config.batch_size,
                      epochs=corpus.train_config.epochs,
                      seed=corpus.train_config.seed,
                      checkpoint_interval=max(1, total // 5))
    start = time.perf_counter()
    checkpoints = train_sgd(model, corpus.train, cfg, eval_data=corpus.test)
    return checkpoints, time.perf_counter() - start


@pytest.fixture(scope="session")
def checkpoints(training_run) -> list[Checkpoint]:
    return training_run[0]


@pytest.fixture(scope="session")
def train_seconds(training_run) -> float:
    return training_run[1]


@pytest.fixture(scope="session")
def trained_model(checkpoints):
    return checkpoints[-1].model


@pytest.fixture(scope="session")
def trained_accuracy(checkpoints) -> float:
    return checkpoints[-1].test_accuracy
