"""Patch scoring: 1-nearest-neighbor distance to the train bank within a local spatial window.

For every test patch (h, w) the score is the smallest Euclidean distance between
its feature vector and any train vector at an in-bounds location (h+dh, w+dw)
with offsets ranging over a centered window. A 1x1 window reduces to
same-location search; a window covering the whole grid reduces to global search.

The engine iterates over window offsets, keeping a running minimum of squared
distances and taking one square root at the end. Out-of-bounds offsets are
skipped, never padded, so border scores only ever compare against real train
vectors. Train samples are chunked to honor the configured memory budget; the
chunking provably cannot change any output value (each distance is computed
identically and min is exact), so results are budget- and thread-invariant.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .embedding import EmbeddingTensor
from .storage import (
    CorruptionError,
    StorageError,
    _atomic_write,
    _pack_str,
    _Reader,
    check_magic,
)

BANK_MAGIC = b"LWNK"
BANK_VERSION = 1

MODE_LOCAL = "local_window"
MODE_PER_LOCATION = "per_location"
MODE_GLOBAL = "global"
SEARCH_MODES = (MODE_LOCAL, MODE_PER_LOCATION, MODE_GLOBAL)

DEFAULT_MEMORY_BUDGET = 1 << 30  # 1 GiB of transient distance buffers


@dataclass
class SearchConfig:
    window_size: int = 7
    mode: str = MODE_LOCAL
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def validate(self) -> None:
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 1, got {self.window_size}")
        if self.mode not in SEARCH_MODES:
            raise ValueError(f"mode must be one of {SEARCH_MODES}, got {self.mode!r}")
        if self.memory_budget <= 0:
            raise ValueError(f"memory_budget must be positive, got {self.memory_budget}")


@dataclass
class PatchScoreMap:
    """Per-patch anomaly scores on the (H1, W1) embedding grid."""

    data: np.ndarray
    image_id: str


@dataclass
class EmbeddingBank:
    """Stacked train embeddings of shape (N_train, C, H1, W1); read-only after construction."""

    data: np.ndarray
    category: str = "default"
    fingerprint: str = ""

    def __post_init__(self) -> None:
        if self.data.ndim != 4:
            raise ValueError(f"bank tensor must be (N, C, H1, W1), got {self.data.shape}")
        if self.data.dtype != np.float32:
            raise ValueError(f"bank tensor must be float32, got {self.data.dtype}")
        self.data.flags.writeable = False

    @property
    def n_train(self) -> int:
        return self.data.shape[0]

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1], self.data.shape[2], self.data.shape[3]


def build_bank(
    embeddings: Sequence[EmbeddingTensor], category: str = "default", fingerprint: str = ""
) -> EmbeddingBank:
    if not embeddings:
        raise ValueError("cannot build a bank from zero embeddings")
    shape = embeddings[0].data.shape
    for emb in embeddings[1:]:
        if emb.data.shape != shape:
            raise ValueError(
                f"embedding {emb.image_id} has shape {emb.data.shape}, expected {shape}"
            )
    stacked = np.stack([emb.data for emb in embeddings], axis=0)
    return EmbeddingBank(np.ascontiguousarray(stacked, dtype=np.float32), category, fingerprint)


def save_bank(bank: EmbeddingBank, path: str) -> None:
    n, c, h, w = bank.data.shape
    parts = [
        BANK_MAGIC,
        struct.pack("<I", BANK_VERSION),
        _pack_str(bank.category),
        _pack_str(bank.fingerprint),
        struct.pack("<IIII", n, c, h, w),
        np.ascontiguousarray(bank.data, dtype="<f4").tobytes(),
    ]
    try:
        _atomic_write(path, b"".join(parts))
    except OSError as exc:
        raise StorageError(f"cannot write bank to {path}: {exc}") from exc


def load_bank(path: str) -> EmbeddingBank:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read bank {path}: {exc}") from exc
    reader = _Reader(buf, path)
    check_magic(reader, BANK_MAGIC, BANK_VERSION)
    category = reader.string()
    fingerprint = reader.string()
    n, c, h, w = (reader.u32() for _ in range(4))
    data = reader.floats(n * c * h * w).reshape(n, c, h, w)
    if reader.pos != len(buf):
        raise CorruptionError(f"{path}: trailing bytes after declared payload")
    return EmbeddingBank(data, category, fingerprint)


def read_bank_fingerprint(path: str) -> str:
    """Fingerprint from a bank file header without loading the tensor payload."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
            if head[:4] != BANK_MAGIC:
                raise CorruptionError(f"{path}: not a bank file")
            if struct.unpack("<I", head[4:8])[0] != BANK_VERSION:
                raise CorruptionError(f"{path}: unsupported bank version")
            (cat_len,) = struct.unpack("<H", fh.read(2))
            fh.seek(cat_len, 1)
            (fp_len,) = struct.unpack("<H", fh.read(2))
            return fh.read(fp_len).decode("utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read bank {path}: {exc}") from exc


def _offset_ranges(cfg: SearchConfig, grid_h: int, grid_w: int) -> tuple[range, range]:
    if cfg.mode == MODE_PER_LOCATION:
        return range(0, 1), range(0, 1)
    if cfg.mode == MODE_GLOBAL:
        return range(-(grid_h - 1), grid_h), range(-(grid_w - 1), grid_w)
    radius = cfg.window_size // 2
    return range(-radius, radius + 1), range(-radius, radius + 1)


def effective_window(
    cfg: SearchConfig, grid_h: int, grid_w: int, h: int, w: int
) -> list[tuple[int, int]]:
    """In-bounds train coordinates the minimum at (h, w) ranges over, row-major."""
    cfg.validate()
    if not (0 <= h < grid_h and 0 <= w < grid_w):
        raise ValueError(f"location ({h}, {w}) outside {grid_h}x{grid_w} grid")
    dh_range, dw_range = _offset_ranges(cfg, grid_h, grid_w)
    return [
        (h + dh, w + dw)
        for dh in dh_range
        for dw in dw_range
        if 0 <= h + dh < grid_h and 0 <= w + dw < grid_w
    ]


def _chunk_size(bank: EmbeddingBank, budget: int) -> int:
    c, h, w = bank.feature_shape
    slice_bytes = 4 * c * h * w
    chunk = budget // slice_bytes
    if chunk < 1:
        raise ValueError(
            f"memory_budget of {budget} bytes is smaller than one "
            f"(C, H1, W1) train slice of {slice_bytes} bytes"
        )
    return min(chunk, bank.n_train)


def _min_squared_distances(
    test: np.ndarray, bank_data: np.ndarray, cfg: SearchConfig, chunk: int
) -> np.ndarray:
    grid_h, grid_w = test.shape[1], test.shape[2]
    n_train = bank_data.shape[0]
    best = np.full((grid_h, grid_w), np.inf, dtype=np.float32)
    dh_range, dw_range = _offset_ranges(cfg, grid_h, grid_w)
    for dh in dh_range:
        h_lo, h_hi = max(0, -dh), grid_h - max(0, dh)
        if h_lo >= h_hi:
            continue
        for dw in dw_range:
            w_lo, w_hi = max(0, -dw), grid_w - max(0, dw)
            if w_lo >= w_hi:
                continue
            test_view = test[:, h_lo:h_hi, w_lo:w_hi]
            region = best[h_lo:h_hi, w_lo:w_hi]
            for m0 in range(0, n_train, chunk):
                train_view = bank_data[
                    m0 : m0 + chunk, :, h_lo + dh : h_hi + dh, w_lo + dw : w_hi + dw
                ]
                diff = train_view - test_view[None, :, :, :]
                np.square(diff, out=diff)
                # channel axis is not innermost, so this reduction is sequential
                # in c: the same value regardless of chunk size
                d2 = diff.sum(axis=1)
                np.minimum(region, d2.min(axis=0), out=region)
    return best


def score_patches(test: EmbeddingTensor, bank: EmbeddingBank, cfg: SearchConfig) -> PatchScoreMap:
    """Minimum in-window L2 distance from each test patch to the train bank."""
    cfg.validate()
    if bank.n_train == 0:
        raise ValueError("embedding bank is empty")
    if test.data.shape != bank.data.shape[1:]:
        raise ValueError(
            f"test embedding shape {test.data.shape} does not match "
            f"bank feature shape {bank.data.shape[1:]}"
        )
    chunk = _chunk_size(bank, cfg.memory_budget)
    best = _min_squared_distances(test.data, bank.data, cfg, chunk)
    return PatchScoreMap(np.sqrt(best, dtype=np.float32), test.image_id)


def score_patches_batch(
    tests: Iterable[EmbeddingTensor],
    bank: EmbeddingBank,
    cfg: SearchConfig,
    threads: int = 1,
) -> list[PatchScoreMap]:
    """Score a batch of test embeddings; equal to per-image calls, in input order.

    The memory budget applies per concurrent worker, so peak transient memory
    is roughly ``threads * memory_budget``.
    """
    tests = list(tests)
    if threads <= 1 or len(tests) <= 1:
        return [score_patches(t, bank, cfg) for t in tests]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda t: score_patches(t, bank, cfg), tests))
