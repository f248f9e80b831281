"""Region-perturbation evaluation of heatmaps.

The image is tiled with non-overlapping square windows; a heatmap induces
an ordering of those regions by summed score. Information is then removed
region by region, most relevant first (MoRF) or least relevant first
(LeRF), and the classifier's logit for the class predicted on the clean
image is re-measured after every step. Good heatmaps make the MoRF curve
fall fast; the summary numbers are

    AOPC = mean over images of sum_k (f(x_0) - f(x_k)) / (L + 1)
    ABPC = mean over images of sum_k (f_LeRF(x_k) - f_MoRF(x_k)) / (L + 1)

Four information-removal operators are provided: uniform noise, samples
from a dataset-fitted Dirichlet color model, the per-location dataset mean
(Constant), and Gaussian blur (sigma 3). Stochastic operators average a
configurable number of independent trajectories per image; each trajectory
draws from a generator seeded by (seed, image_key, repeat), so results are
identical no matter how work is parallelized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attribution import Heatmap
from .datahub import DatasetStats, sample_dirichlet
from .netcore import Array, Model, forward_logits

OPERATORS = ("uniform", "dirichlet", "constant", "blur")
STOCHASTIC_OPERATORS = ("uniform", "dirichlet")

#: Fraction of the image the reference protocol perturbs: 100 windows of
#: 9x9 pixels on a 227x227 image.
REFERENCE_STEPS = 100
REFERENCE_FRACTION = REFERENCE_STEPS * 81 / (227 * 227)

BLUR_SIGMA = 3.0


@dataclass(frozen=True)
class Region:
    """A perturbation window, fully inside the image."""

    top: int
    left: int
    height: int
    width: int

    def slices(self) -> tuple[slice, slice]:
        return (slice(self.top, self.top + self.height),
                slice(self.left, self.left + self.width))


@dataclass
class RegionOrdering:
    """Regions sorted by non-increasing score; pairwise disjoint."""

    regions: tuple[Region, ...]
    scores: np.ndarray

    def __post_init__(self):
        self.regions = tuple(self.regions)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.regions) != len(self.scores):
            raise ValueError(f"{len(self.regions)} regions but "
                             f"{len(self.scores)} scores")
        if len(self.scores) > 1 and np.any(np.diff(self.scores) > 0):
            raise ValueError("ordering scores must be non-increasing")
        _check_disjoint(self.regions)

    def __len__(self) -> int:
        return len(self.regions)


def _check_disjoint(regions: tuple[Region, ...]) -> None:
    if len(regions) < 2:
        return
    top = np.array([r.top for r in regions])
    left = np.array([r.left for r in regions])
    bottom = top + np.array([r.height for r in regions])
    right = left + np.array([r.width for r in regions])
    overlap_v = (top[:, None] < bottom[None, :]) & (top[None, :] < bottom[:, None])
    overlap_h = (left[:, None] < right[None, :]) & (left[None, :] < right[:, None])
    collide = overlap_v & overlap_h
    np.fill_diagonal(collide, False)
    if collide.any():
        i, j = np.argwhere(collide)[0]
        raise ValueError(f"regions {i} and {j} overlap: "
                         f"{regions[i]} vs {regions[j]}")


@dataclass(frozen=True)
class PerturbationConfig:
    """Operator, trajectory length, repeat count and seed for curve runs.

    `blur_sigma` defaults to the reference protocol's 3.0; desk-scale runs
    on small images should shrink it so the kernel stays local relative to
    the image (the regime the Blur operator is meant to probe).
    """

    operator: str = "uniform"
    steps: int = REFERENCE_STEPS
    repeats: int = 10
    seed: int = 0
    window: int = 9
    blur_sigma: float = BLUR_SIGMA

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}; valid: "
                             f"{', '.join(OPERATORS)}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.blur_sigma <= 0:
            raise ValueError(f"blur_sigma must be > 0, got {self.blur_sigma}")

    @property
    def effective_repeats(self) -> int:
        """Deterministic operators collapse to a single trajectory."""
        return self.repeats if self.operator in STOCHASTIC_OPERATORS else 1


@dataclass
class PerturbationCurve:
    """f-values at steps 0..L for one image, averaged over repeats."""

    values: np.ndarray
    direction: str  # "morf" or "lerf"
    image_key: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or len(self.values) < 1:
            raise ValueError("curve needs at least the unperturbed value")

    @property
    def steps(self) -> int:
        return len(self.values) - 1


def build_region_grid(height: int, width: int, window: int = 9) -> list[Region]:
    """Non-overlapping tiling with full windows, anchored top-left; trailing
    strips narrower than the window are excluded."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if window > height or window > width:
        raise ValueError(f"window {window} exceeds image extent {height}x{width}")
    return [Region(r, c, window, window)
            for r in range(0, height - window + 1, window)
            for c in range(0, width - window + 1, window)]


def scaled_step_count(height: int, width: int, window: int) -> int:
    """Step count covering the same image fraction as the reference
    protocol (100 9x9 windows on 227x227), at least 1."""
    if window < 1 or window > height or window > width:
        raise ValueError(f"window {window} does not fit a {height}x{width} image")
    n_regions = (height // window) * (width // window)
    steps = round(REFERENCE_FRACTION * height * width / (window * window))
    return max(1, min(int(steps), n_regions))


def order_regions(heatmap: Heatmap, regions: list[Region]) -> RegionOrdering:
    """Sort regions by summed heatmap score, descending; ties break to the
    lower (row-major) region index."""
    h, w = heatmap.scores.shape
    for r in regions:
        if r.top < 0 or r.left < 0 or r.top + r.height > h or r.left + r.width > w:
            raise ValueError(f"{r} lies outside the {h}x{w} heatmap")
    sums = np.array([heatmap.scores[r.slices()].sum() for r in regions])
    order = np.argsort(-sums, kind="stable")
    return RegionOrdering(tuple(regions[i] for i in order), sums[order])


def gaussian_blur(image: Array, sigma: float = BLUR_SIGMA) -> Array:
    """Separable Gaussian blur of a (C, H, W) image, kernel truncated at
    radius 3*sigma, edges clamped (replicated)."""
    radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(image, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(image)
    for i, k in enumerate(kernel):
        out += k * padded[:, i:i + image.shape[1], :]
    padded = np.pad(out, ((0, 0), (0, 0), (radius, radius)), mode="edge")
    out = np.zeros_like(image)
    for i, k in enumerate(kernel):
        out += k * padded[:, :, i:i + image.shape[2]]
    return out


def _fill_region(target: Array, region: Region, operator: str,
                 rng: np.random.Generator | None,
                 stats: DatasetStats | None,
                 blur_source: Array | None) -> None:
    """Overwrite one region of a (C, H, W) image in place."""
    rows, cols = region.slices()
    c = target.shape[0]
    if operator == "uniform":
        target[:, rows, cols] = rng.random((c, region.height, region.width))
    elif operator == "dirichlet":
        samples = sample_dirichlet(stats.dirichlet, rng,
                                   size=region.height * region.width)
        block = samples.reshape(region.height, region.width, -1).transpose(2, 0, 1)
        target[:, rows, cols] = block
    elif operator == "constant":
        target[:, rows, cols] = stats.mean_image[:, rows, cols]
    elif operator == "blur":
        target[:, rows, cols] = blur_source[:, rows, cols]
    else:
        raise ValueError(f"unknown operator {operator!r}")
    np.clip(target[:, rows, cols], 0.0, 1.0, out=target[:, rows, cols])


def _require_stats(operator: str, stats: DatasetStats | None) -> None:
    if operator == "constant" and (stats is None or stats.mean_image is None):
        raise ValueError("the constant operator needs DatasetStats.mean_image")
    if operator == "dirichlet" and (stats is None or stats.dirichlet is None):
        raise ValueError("the dirichlet operator needs DatasetStats.dirichlet")


def _require_unit_range(image: Array) -> None:
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError(f"pixel values must lie in [0, 1], got range "
                         f"[{image.min():.3g}, {image.max():.3g}]")


def perturb_region(image: Array, region: Region, operator: str,
                   rng: np.random.Generator | None = None,
                   stats: DatasetStats | None = None,
                   blur_sigma: float = BLUR_SIGMA) -> Array:
    """Return a copy of the image with one region's information removed.

    Pixels outside the region are untouched; the result stays in [0, 1].
    """
    _require_stats(operator, stats)
    if operator in STOCHASTIC_OPERATORS and rng is None:
        raise ValueError(f"the {operator} operator needs an rng")
    out = np.array(image, dtype=np.float64)
    _require_unit_range(out)
    blur_source = gaussian_blur(out, blur_sigma) if operator == "blur" else None
    _fill_region(out, region, operator, rng, stats, blur_source)
    return out


def trajectory_rng(seed: int, image_key: int, repeat: int) -> np.random.Generator:
    """The documented seed derivation: parallel and serial runs produce
    identical draws because every (image, repeat) trajectory owns a
    generator derived from (seed, image_key, repeat)."""
    return np.random.default_rng(np.random.SeedSequence((seed, image_key, repeat)))


def _curve(model: Model, image: Array, regions: tuple[Region, ...],
           config: PerturbationConfig, stats: DatasetStats | None,
           direction: str, image_key: int) -> PerturbationCurve:
    _require_stats(config.operator, stats)
    if config.steps > len(regions):
        raise ValueError(f"steps {config.steps} exceeds the {len(regions)} "
                         f"available regions")
    image = np.asarray(image, dtype=np.float64)
    _require_unit_range(image)
    logits0 = forward_logits(model, image[None])[0]
    target_class = int(np.argmax(logits0))

    repeats = config.effective_repeats
    rngs = [trajectory_rng(config.seed, image_key, r) for r in range(repeats)]
    # the blur source is the clean image, blurred once; regions are disjoint
    # so cumulative application equals copying from this single rendition
    blur_source = (gaussian_blur(image, config.blur_sigma)
                   if config.operator == "blur" else None)

    values = np.empty(config.steps + 1)
    values[0] = logits0[target_class]
    batch = np.repeat(image[None], repeats, axis=0)
    for k in range(1, config.steps + 1):
        region = regions[k - 1]
        for r in range(repeats):
            _fill_region(batch[r], region, config.operator, rngs[r],
                         stats, blur_source)
        logits = forward_logits(model, batch)
        values[k] = logits[:, target_class].mean()
    return PerturbationCurve(values, direction, image_key)


def morf_curve(model: Model, image: Array, ordering: RegionOrdering,
               config: PerturbationConfig, stats: DatasetStats | None = None,
               image_key: int = 0) -> PerturbationCurve:
    """Most-relevant-first perturbation curve (averaged over repeats for
    stochastic operators). f is the pre-softmax logit of the class predicted
    on the unperturbed image, re-measured after every cumulative step."""
    return _curve(model, image, ordering.regions, config, stats, "morf", image_key)


def lerf_curve(model: Model, image: Array, ordering: RegionOrdering,
               config: PerturbationConfig, stats: DatasetStats | None = None,
               image_key: int = 0) -> PerturbationCurve:
    """Least-relevant-first curve: the ordering walked from the far end."""
    return _curve(model, image, ordering.regions[::-1], config, stats,
                  "lerf", image_key)


def aopc(curves: list[PerturbationCurve] | np.ndarray) -> float:
    """Area over the perturbation curve, averaged over images."""
    values = _stack_curves(curves)
    drops = values[:, :1] - values
    return float(drops.sum(axis=1).mean() / values.shape[1])


def aopc_series(curves: list[PerturbationCurve] | np.ndarray) -> np.ndarray:
    """AOPC as a function of the step count: entry k (k = 0..L) is the AOPC
    of the curves truncated after k steps; entry 0 is always 0."""
    values = _stack_curves(curves)
    drops = (values[:, :1] - values).mean(axis=0)
    return np.cumsum(drops) / np.arange(1, len(drops) + 1)


def abpc(lerf_curves: list[PerturbationCurve] | np.ndarray,
         morf_curves: list[PerturbationCurve] | np.ndarray) -> float:
    """Area between the LeRF and MoRF curves, averaged over images."""
    lerf_values = _stack_curves(lerf_curves)
    morf_values = _stack_curves(morf_curves)
    if lerf_values.shape != morf_values.shape:
        raise ValueError(f"mismatched curve sets: {lerf_values.shape} vs "
                         f"{morf_values.shape}")
    return float((lerf_values - morf_values).sum(axis=1).mean()
                 / lerf_values.shape[1])


def _stack_curves(curves) -> np.ndarray:
    if isinstance(curves, np.ndarray):
        values = np.asarray(curves, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ValueError("expected a non-empty (n_images, L+1) array")
        return values
    if not curves:
        raise ValueError("no curves given")
    lengths = {len(c.values) for c in curves}
    if len(lengths) > 1:
        raise ValueError(f"curves disagree in length: {sorted(lengths)}")
    return np.stack([c.values for c in curves])
