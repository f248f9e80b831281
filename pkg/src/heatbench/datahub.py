"""Dataset ingestion and the statistics the perturbation operators need.

Supported on-disk formats:

* idx: the classic big-endian IDX pair (magic 0x00000803 for images,
  0x00000801 for labels); pass the images file, the labels file is found by
  name ("...images-idx3..." -> "...labels-idx1..."). ".gz" is transparent.
* cifar-binary: 3073-byte records, one label byte then 3x1024 channel
  planes of a 32x32 RGB image; pass one .bin file or a directory of them.
* image-directory: one subdirectory per class holding 8-bit PNG/PPM/PGM
  images; labels follow the sorted subdirectory names.

Pixel values are normalized to [0, 1]; ordering is deterministic (record
order, or sorted file names).

The Dirichlet perturbation operator draws RGB values from a fitted
four-component Dirichlet over the simplex embedding (r, g, b, 3-r-g-b)/3,
rescaled by 3 with rejection of components above 1, which keeps samples
inside [0,1]^3 while matching the dataset's color statistics. Grayscale
datasets use the two-component embedding (v, 1-v) (a beta distribution).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMATS = ("idx", "cifar-binary", "image-directory")


class DataFormatError(ValueError):
    """Dataset file failed to parse."""


class TruncatedDataError(DataFormatError):
    """Dataset file ended before its declared content."""


@dataclass
class Dataset:
    """Images (N, C, H, W) in [0, 1], integer labels, split tag, class names."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= len(self.class_names)):
            raise ValueError(f"labels must lie in [0, {len(self.class_names)}), "
                             f"got range [{self.labels.min()}, {self.labels.max()}]")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass
class DirichletParams:
    """Concentration parameters of the fitted simplex distribution; length 4
    for RGB datasets, 2 for grayscale."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1 or len(self.alpha) not in (2, 4):
            raise ValueError(f"alpha must have 2 or 4 components, got shape "
                             f"{self.alpha.shape}")
        if not (self.alpha > 0).all():
            raise ValueError(f"concentration parameters must be > 0, got {self.alpha}")

    @property
    def channels(self) -> int:
        return 3 if len(self.alpha) == 4 else 1


@dataclass
class DatasetStats:
    """Inputs for the Constant (mean_image) and Dirichlet operators."""

    mean_image: np.ndarray
    dirichlet: DirichletParams | None = None


def _open_maybe_gz(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, path: Path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedDataError(f"{path}: truncated while reading {what} "
                                 f"(wanted {n} bytes, got {len(data)})")
    return data


def load_idx_array(path: str | Path) -> np.ndarray:
    """Raw IDX payload as a uint8 array of the declared dimensions."""
    path = Path(path)
    with _open_maybe_gz(path) as f:
        magic = struct.unpack(">I", _read_exact(f, 4, path, "magic"))[0]
        if magic not in (0x00000803, 0x00000801):
            raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x} "
                                  f"(expected 0x00000803 or 0x00000801)")
        ndim = magic & 0xFF
        dims = [struct.unpack(">I", _read_exact(f, 4, path, f"dimension {i}"))[0]
                for i in range(ndim)]
        payload = _read_exact(f, int(np.prod(dims)), path,
                              f"{dims} payload")
        if f.read(1):
            raise DataFormatError(f"{path}: trailing bytes after declared content")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def _labels_path_for(images_path: Path) -> Path:
    name = images_path.name
    if "images-idx3" not in name:
        raise DataFormatError(
            f"{images_path}: cannot infer labels file; expected a name "
            f"containing 'images-idx3'")
    return images_path.with_name(name.replace("images-idx3", "labels-idx1"))


def _load_idx(path: Path) -> Dataset:
    images = load_idx_array(path)
    if images.ndim != 3:
        raise DataFormatError(f"{path}: expected a 3-D image IDX file, "
                              f"got {images.ndim} dimensions")
    labels_path = _labels_path_for(path)
    if not labels_path.exists():
        raise DataFormatError(f"{labels_path}: labels file not found")
    labels = load_idx_array(labels_path)
    if labels.ndim != 1 or len(labels) != len(images):
        raise DataFormatError(f"{labels_path}: {labels.shape} labels do not "
                              f"match {len(images)} images")
    split = "train" if path.name.startswith("train") else \
        "test" if path.name.startswith(("t10k", "test")) else "unknown"
    n_classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(images[:, None, :, :] / 255.0, labels, split,
                   tuple(str(i) for i in range(n_classes)))


def _load_cifar(path: Path) -> Dataset:
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    if not files:
        raise DataFormatError(f"{path}: no .bin files found")
    record = 1 + 3 * 1024
    images, labels = [], []
    for f in files:
        blob = f.read_bytes()
        if len(blob) == 0 or len(blob) % record:
            raise TruncatedDataError(
                f"{f}: size {len(blob)} is not a multiple of the "
                f"{record}-byte record (offset {len(blob) - len(blob) % record})")
        arr = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
        labels.append(arr[:, 0])
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(labels)
    meta = (path if path.is_dir() else path.parent) / "batches.meta.txt"
    if meta.exists():
        names = tuple(line for line in meta.read_text().splitlines() if line)
    else:
        names = tuple(str(i) for i in range(int(labels.max()) + 1 if len(labels) else 0))
    split = "test" if any("test" in f.name for f in files) else "train"
    return Dataset(np.concatenate(images) / 255.0, labels, split, names)


def _load_image_directory(path: Path) -> Dataset:
    from PIL import Image, UnidentifiedImageError

    class_dirs = sorted(d for d in path.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataFormatError(f"{path}: no class subdirectories found")
    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        for f in sorted(class_dir.iterdir()):
            if f.suffix.lower() not in (".png", ".ppm", ".pgm"):
                continue
            try:
                with Image.open(f) as im:
                    if im.mode not in ("L", "RGB"):
                        im = im.convert("RGB")
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                raise DataFormatError(f"{f}: unreadable image ({exc})") from exc
            if arr.ndim == 2:
                arr = arr[None]
            else:
                arr = arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(label)
    if not images:
        raise DataFormatError(f"{path}: no PNG/PPM/PGM images found")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataFormatError(f"{path}: images disagree in shape: {sorted(shapes)}")
    return Dataset(np.stack(images), np.asarray(labels), "unknown",
                   tuple(d.name for d in class_dirs))


def load_dataset(path: str | Path, format: str) -> Dataset:
    """Load a dataset; `format` is one of 'idx', 'cifar-binary',
    'image-directory'."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset path {path} does not exist")
    if format == "idx":
        return _load_idx(path)
    if format == "cifar-binary":
        return _load_cifar(path)
    if format == "image-directory":
        return _load_image_directory(path)
    raise ValueError(f"unknown dataset format {format!r}; valid formats: "
                     f"{', '.join(FORMATS)}")


def mean_image(dataset: Dataset) -> np.ndarray:
    """Per-location, per-channel arithmetic mean over all images."""
    if len(dataset) == 0:
        raise ValueError("mean_image of an empty dataset")
    return dataset.images.mean(axis=0)


def _simplex_embedding(images: np.ndarray) -> np.ndarray:
    """Map pixels to the simplex: (r, g, b, 3-r-g-b)/3 for RGB, (v, 1-v)
    for grayscale. Returns an (n_pixels, k) array."""
    c = images.shape[1]
    flat = images.transpose(0, 2, 3, 1).reshape(-1, c)
    if c == 3:
        rest = 3.0 - flat.sum(axis=1)
        return np.column_stack([flat, rest]) / 3.0
    if c == 1:
        return np.column_stack([flat[:, 0], 1.0 - flat[:, 0]])
    raise ValueError(f"Dirichlet fitting needs 1- or 3-channel images, got {c}")


def fit_dirichlet(dataset: Dataset) -> DirichletParams:
    """Moment-matched global Dirichlet fit of the pixel color distribution.

    Rejects zero-variance (degenerate) data: use the Constant operator for
    such datasets instead.
    """
    if len(dataset) == 0:
        raise ValueError("fit_dirichlet of an empty dataset")
    u = _simplex_embedding(dataset.images)
    m = u.mean(axis=0)
    v = u.var(axis=0)
    usable = v > 1e-18  # float accumulation noise on constant data ~1e-32
    if not usable.any():
        raise ValueError("dataset pixel colors have zero variance; the "
                         "Dirichlet operator is degenerate here, use Constant")
    # alpha_0 from each component's mean/variance pair, averaged
    strength = float(np.mean(m[usable] * (1.0 - m[usable]) / v[usable] - 1.0))
    if strength <= 0:
        raise ValueError(f"moment matching produced total concentration "
                         f"{strength:.3g} <= 0; data too dispersed for a "
                         f"Dirichlet fit, use Constant")
    alpha = m * strength
    if not (alpha > 0).all():
        raise ValueError(f"moment matching produced non-positive components "
                         f"{alpha}; use Constant instead")
    return DirichletParams(alpha)


def sample_dirichlet(params: DirichletParams, rng: np.random.Generator,
                     size: int | None = None) -> np.ndarray:
    """Draw pixel color values from the fitted scheme.

    Returns (channels,) for size=None, else (size, channels); values lie in
    [0, 1]. RGB draws are 3 * u[:3] with rejection of components above 1;
    a rejection rate beyond 99.9% aborts (pathological fit).
    """
    n = 1 if size is None else int(size)
    k = len(params.alpha)
    out = np.empty((n, params.channels))
    filled = 0
    drawn = 0
    while filled < n:
        want = n - filled
        u = rng.dirichlet(params.alpha, size=want)
        drawn += want
        if k == 4:
            vals = 3.0 * u[:, :3]
            ok = (vals <= 1.0).all(axis=1)
            vals = vals[ok]
        else:
            vals = u[:, :1]
        out[filled:filled + len(vals)] = vals
        filled += len(vals)
        if drawn >= 1000 and filled / drawn < 0.001:
            raise ValueError(
                f"Dirichlet sampler rejected {drawn - filled} of {drawn} "
                f"draws; fit {params.alpha} is pathological")
    return out[0] if size is None else out


def dataset_stats(dataset: Dataset, with_dirichlet: bool = False) -> DatasetStats:
    """Bundle the statistics the perturbation operators consume."""
    return DatasetStats(
        mean_image=mean_image(dataset),
        dirichlet=fit_dirichlet(dataset) if with_dirichlet else None)
