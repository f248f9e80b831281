"""Heatmap complexity metrics: histogram entropy and compressed file size.

Good heatmaps highlight the relevant regions and not more, so they should
carry little information: low grayscale entropy and small losslessly
compressed size. Both metrics operate on rendered 8-bit images so that all
methods are measured on identical footing.

Encoders are pinned for determinism: PNG at zlib level 6 without optimizer
passes (lossless), baseline JPEG at quality 90 (lossy-q90).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from statistics import mean, median

import numpy as np
from PIL import Image

CODECS = ("lossless", "lossy-q90")

_LUMA = np.array([0.299, 0.587, 0.114])


def _as_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"expected an 8-bit image, got dtype {image.dtype}")
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return image
    raise ValueError(f"expected (H, W) or (H, W, 3), got shape {image.shape}")


def image_entropy(image: np.ndarray) -> float:
    """Shannon entropy (bits) of the 256-bin grayscale histogram; RGB input
    is converted with the standard luma weights first."""
    image = _as_uint8(image)
    if image.ndim == 3:
        gray = np.clip(np.rint(image @ _LUMA), 0, 255).astype(np.uint8)
    else:
        gray = image
    counts = np.bincount(gray.ravel(), minlength=256)
    p = counts[counts > 0] / gray.size
    return float(-(p * np.log2(p)).sum())


def _to_pil(image: np.ndarray) -> Image.Image:
    image = _as_uint8(image)
    return Image.fromarray(image, "RGB" if image.ndim == 3 else "L")


def encode_image(image: np.ndarray, codec: str) -> bytes:
    """Encode with the pinned settings; returns the file bytes."""
    buf = io.BytesIO()
    if codec == "lossless":
        _to_pil(image).save(buf, format="PNG", optimize=False, compress_level=6)
    elif codec == "lossy-q90":
        _to_pil(image).save(buf, format="JPEG", quality=90)
    else:
        raise ValueError(f"unknown codec {codec!r}; valid codecs: {', '.join(CODECS)}")
    return buf.getvalue()


def compressed_size(image: np.ndarray, codec: str) -> int:
    """Byte length of the encoded image (deterministic per codec settings)."""
    return len(encode_image(image, codec))


@dataclass
class ComplexityRow:
    image_id: int
    method: str
    entropy_bits: float
    png_bytes: int
    jpeg_bytes: int


@dataclass
class ComplexityReport:
    rows: list[ComplexityRow]

    def aggregates(self) -> dict[str, dict[str, float]]:
        """Per-method mean and median of each metric."""
        out: dict[str, dict[str, float]] = {}
        methods = sorted({row.method for row in self.rows})
        for m in methods:
            rows = [r for r in self.rows if r.method == m]
            out[m] = {
                "mean_entropy_bits": mean(r.entropy_bits for r in rows),
                "median_entropy_bits": median(r.entropy_bits for r in rows),
                "mean_png_bytes": mean(r.png_bytes for r in rows),
                "median_png_bytes": median(r.png_bytes for r in rows),
                "mean_jpeg_bytes": mean(r.jpeg_bytes for r in rows),
                "median_jpeg_bytes": median(r.jpeg_bytes for r in rows),
            }
        return out


def measure_rendered(image_id: int, method: str,
                     rendered: np.ndarray) -> ComplexityRow:
    """All three metrics for one rendered heatmap image."""
    return ComplexityRow(
        image_id=image_id,
        method=method,
        entropy_bits=image_entropy(rendered),
        png_bytes=compressed_size(rendered, "lossless"),
        jpeg_bytes=compressed_size(rendered, "lossy-q90"),
    )


def write_report_csv(rows: list[ComplexityRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "method", "entropy_bits", "png_bytes",
                         "jpeg_bytes"])
        for row in rows:
            writer.writerow([row.image_id, row.method, repr(row.entropy_bits),
                             row.png_bytes, row.jpeg_bytes])
