"""Per-image patch embeddings: pool each feature map, resize to a common grid, concatenate.

The resulting (C, H1, W1) tensor gives every patch location a single multi-layer
feature vector, with C the sum of the selected layers' channel counts and
(H1, W1) the post-pool size of the first selected layer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .storage import FeatureBundle

INTERPOLATION_MODES = ("bilinear", "nearest")


@dataclass
class EmbeddingConfig:
    pooling: bool = True
    pool_kernel: int = 3
    pool_stride: int = 1
    interpolation: str = "bilinear"
    layer_indices: tuple[int, ...] = (0, 1, 2)

    def validate(self) -> None:
        if self.pool_kernel < 1:
            raise ValueError(f"pool_kernel must be >= 1, got {self.pool_kernel}")
        if self.pool_stride < 1:
            raise ValueError(f"pool_stride must be >= 1, got {self.pool_stride}")
        if self.interpolation not in INTERPOLATION_MODES:
            raise ValueError(
                f"interpolation must be one of {INTERPOLATION_MODES}, got {self.interpolation!r}"
            )
        if not self.layer_indices:
            raise ValueError("layer_indices must not be empty")
        if any(i < 0 for i in self.layer_indices):
            raise ValueError(f"layer_indices must be non-negative, got {self.layer_indices}")

    def fingerprint(self) -> str:
        """Stable hash of the config; banks record it so scoring can reject mismatches."""
        self.validate()
        canon = (
            f"pooling={int(self.pooling)};kernel={self.pool_kernel};"
            f"stride={self.pool_stride};interpolation={self.interpolation};"
            f"layers={','.join(str(i) for i in self.layer_indices)}"
        )
        return hashlib.sha256(canon.encode("ascii")).hexdigest()[:16]


@dataclass
class EmbeddingTensor:
    """One image's concatenated patch embedding of shape (C, H1, W1)."""

    data: np.ndarray
    image_id: str
    height: int = 0
    width: int = 0

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


def avg_pool(feature_map: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Valid (no padding) 2D average pooling over the spatial axes of a (C, H, W) map."""
    if feature_map.ndim != 3:
        raise ValueError(f"expected (C, H, W) map, got shape {feature_map.shape}")
    _, h, w = feature_map.shape
    if h < kernel or w < kernel:
        raise ValueError(f"spatial size {h}x{w} smaller than pool kernel {kernel}")
    windows = np.lib.stride_tricks.sliding_window_view(feature_map, (kernel, kernel), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    # float64 accumulation keeps constant maps exactly constant after the divide
    return windows.mean(axis=(-2, -1), dtype=np.float64).astype(np.float32)


def _bilinear_axis(src_size: int, dst_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source coordinates for one axis: lo index, hi index, hi weight."""
    coords = (np.arange(dst_size, dtype=np.float64) + 0.5) * (src_size / dst_size) - 0.5
    coords = np.clip(coords, 0.0, src_size - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, src_size - 1)
    return lo, hi, coords - lo


def _nearest_axis(src_size: int, dst_size: int) -> np.ndarray:
    # the source cell containing the half-pixel-center coordinate
    coords = (np.arange(dst_size, dtype=np.float64) + 0.5) * (src_size / dst_size)
    return np.clip(np.floor(coords).astype(np.intp), 0, src_size - 1)


def resize_map(feature_map: np.ndarray, target: tuple[int, int], mode: str) -> np.ndarray:
    """Resize a (C, h, w) map to (C, H1, W1) with half-pixel-center sampling.

    Resizing to the map's own size returns it bit-identically in both modes.
    """
    if feature_map.ndim != 3:
        raise ValueError(f"expected (C, h, w) map, got shape {feature_map.shape}")
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be >= 1, got {target}")
    _, h, w = feature_map.shape
    if mode == "nearest":
        ys = _nearest_axis(h, th)
        xs = _nearest_axis(w, tw)
        return np.ascontiguousarray(feature_map[:, ys[:, None], xs[None, :]])
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    y0, y1, fy = _bilinear_axis(h, th)
    x0, x1, fx = _bilinear_axis(w, tw)
    fy = fy[:, None]
    fx = fx[None, :]
    v00 = feature_map[:, y0[:, None], x0[None, :]].astype(np.float64)
    v01 = feature_map[:, y0[:, None], x1[None, :]].astype(np.float64)
    v10 = feature_map[:, y1[:, None], x0[None, :]].astype(np.float64)
    v11 = feature_map[:, y1[:, None], x1[None, :]].astype(np.float64)
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bot * fy
    return out.astype(np.float32)


def build_embedding(bundle: FeatureBundle, cfg: EmbeddingConfig) -> EmbeddingTensor:
    """Pool, resize, and channel-concatenate the selected layers of ``bundle``."""
    cfg.validate()
    n_layers = len(bundle.layers)
    for idx in cfg.layer_indices:
        if idx >= n_layers:
            raise ValueError(
                f"{bundle.image_id}: layer index {idx} out of range for {n_layers}-layer bundle"
            )
    processed = []
    for idx in cfg.layer_indices:
        layer = bundle.layers[idx]
        if cfg.pooling:
            _, h, w = layer.shape
            if h < cfg.pool_kernel or w < cfg.pool_kernel:
                raise ValueError(
                    f"{bundle.image_id}: layer {idx} spatial size {h}x{w} "
                    f"smaller than pool kernel {cfg.pool_kernel}"
                )
            layer = avg_pool(layer, cfg.pool_kernel, cfg.pool_stride)
        processed.append(layer)
    target = processed[0].shape[1:]
    aligned = [
        lay if lay.shape[1:] == target else resize_map(lay, target, cfg.interpolation)
        for lay in processed
    ]
    data = np.ascontiguousarray(np.concatenate(aligned, axis=0), dtype=np.float32)
    return EmbeddingTensor(
        data=data, image_id=bundle.image_id, height=bundle.height, width=bundle.width
    )
