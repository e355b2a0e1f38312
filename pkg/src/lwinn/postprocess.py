"""Patch scores to deliverables: full-resolution anomaly maps and scalar image scores.

Patch score maps are bilinearly upsampled to the original image size and
smoothed with a Gaussian blur (sigma 4 by default). The image score is the
maximum patch score, taken on the raw (H1, W1) map before any post-processing;
a whole-embedding K-nearest-neighbor mean distance is available as an
alternative aggregation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import ceil

import numpy as np
from scipy.ndimage import gaussian_filter

from .embedding import EmbeddingTensor, resize_map
from .search import EmbeddingBank, PatchScoreMap
from .storage import (
    CorruptionError,
    StorageError,
    _atomic_write,
    _pack_str,
    _Reader,
    check_magic,
)

MAP_MAGIC = b"LWNM"
MAP_VERSION = 1

AGG_MAX_PATCH = "max_patch"
AGG_KNN_IMAGE = "knn_image"
AGGREGATIONS = (AGG_MAX_PATCH, AGG_KNN_IMAGE)


@dataclass
class PixelAnomalyMap:
    """Full-resolution (H0, W0) per-pixel anomaly scores."""

    data: np.ndarray
    image_id: str


@dataclass
class ImageScore:
    image_id: str
    score: float
    aggregation: str = AGG_MAX_PATCH


def image_score_max(patch_map: PatchScoreMap) -> ImageScore:
    """Maximum patch score; the default whole-image aggregation."""
    return ImageScore(patch_map.image_id, float(patch_map.data.max()), AGG_MAX_PATCH)


def image_score_knn(test: EmbeddingTensor, bank: EmbeddingBank, k: int) -> ImageScore:
    """Mean whole-embedding L2 distance to the k closest train embeddings."""
    if not 1 <= k <= bank.n_train:
        raise ValueError(f"k must be in [1, {bank.n_train}], got {k}")
    if test.data.shape != bank.data.shape[1:]:
        raise ValueError(
            f"test embedding shape {test.data.shape} does not match "
            f"bank feature shape {bank.data.shape[1:]}"
        )
    flat_bank = bank.data.reshape(bank.n_train, -1).astype(np.float64)
    flat_test = test.data.reshape(-1).astype(np.float64)
    dists = np.sqrt(((flat_bank - flat_test) ** 2).sum(axis=1))
    nearest = np.sort(dists)[:k]
    return ImageScore(test.image_id, float(nearest.mean()), AGG_KNN_IMAGE)


def upsample_scores(patch_map: PatchScoreMap, height: int, width: int) -> PixelAnomalyMap:
    """Bilinear upsample to the original image size (half-pixel-center convention)."""
    if height < 1 or width < 1:
        raise ValueError(f"target size must be >= 1, got {height}x{width}")
    resized = resize_map(patch_map.data[None, :, :], (height, width), "bilinear")[0]
    return PixelAnomalyMap(resized, patch_map.image_id)


def gaussian_blur(pixel_map: PixelAnomalyMap, sigma: float) -> PixelAnomalyMap:
    """Gaussian smoothing: kernel truncated at radius ceil(4*sigma), normalized, reflect borders."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = ceil(4.0 * sigma)
    blurred = gaussian_filter(
        pixel_map.data.astype(np.float64), sigma=sigma, mode="reflect", radius=radius
    )
    return PixelAnomalyMap(blurred.astype(np.float32), pixel_map.image_id)


def save_map(data: np.ndarray, image_id: str, path: str) -> None:
    """Write a 2D float32 score map in the LWNM container."""
    if data.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {data.shape}")
    h, w = data.shape
    parts = [
        MAP_MAGIC,
        struct.pack("<I", MAP_VERSION),
        _pack_str(image_id),
        struct.pack("<II", h, w),
        np.ascontiguousarray(data, dtype="<f4").tobytes(),
    ]
    try:
        _atomic_write(path, b"".join(parts))
    except OSError as exc:
        raise StorageError(f"cannot write map to {path}: {exc}") from exc


def load_map(path: str) -> tuple[np.ndarray, str]:
    """Read an LWNM score map; returns (data, image_id)."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read map {path}: {exc}") from exc
    reader = _Reader(buf, path)
    check_magic(reader, MAP_MAGIC, MAP_VERSION)
    image_id = reader.string()
    h = reader.u32()
    w = reader.u32()
    data = reader.floats(h * w).reshape(h, w)
    if reader.pos != len(buf):
        raise CorruptionError(f"{path}: trailing bytes after declared payload")
    return data, image_id


def render_heatmap(
    data: np.ndarray,
    path: str,
    original: "np.ndarray | None" = None,
    alpha: float = 0.5,
    colormap: str = "jet",
) -> None:
    """Write a min-max normalized, colormapped PNG of a score map.

    ``original``, when given, is an (H, W) or (H, W, 3) uint8 image of the same
    size that the heatmap is alpha-blended over. Visualization only; metrics
    never touch these files.
    """
    from matplotlib import colormaps
    from PIL import Image

    lo = float(data.min())
    hi = float(data.max())
    norm = np.zeros_like(data, dtype=np.float64) if hi == lo else (data - lo) / (hi - lo)
    rgba = colormaps[colormap](norm)
    rgb = (rgba[:, :, :3] * 255.0).round().astype(np.uint8)
    if original is not None:
        if original.ndim == 2:
            original = np.stack([original] * 3, axis=-1)
        if original.shape[:2] != data.shape:
            raise ValueError(
                f"original image size {original.shape[:2]} does not match map {data.shape}"
            )
        blend = alpha * rgb.astype(np.float64) + (1.0 - alpha) * original[:, :, :3]
        rgb = blend.round().astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
