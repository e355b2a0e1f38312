"""Writers for the LWNB bundle and manifest formats consumed by the lwinn engine.

The formats are the interface contract between the extractor and the engine:
bundle files are little-endian binary (magic LWNB, version 1, image id, image
size, label byte, then per layer dims + row-major float32 payload); manifests
are tab-separated text lines ``bundle_path<TAB>label[<TAB>mask_path]``.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

BUNDLE_MAGIC = b"LWNB"
BUNDLE_VERSION = 1
LABEL_CODES = {"normal": 0, "anomalous": 1, "unknown": 2}


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".lwinn-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_bundle(
    path: str,
    image_id: str,
    height: int,
    width: int,
    layers: list[np.ndarray],
    label: str = "unknown",
) -> None:
    """Serialize per-layer float32 feature maps as one LWNB file."""
    if label not in LABEL_CODES:
        raise ValueError(f"unknown label {label!r}")
    for i, layer in enumerate(layers):
        if layer.ndim != 3:
            raise ValueError(f"layer {i}: expected (C, H, W), got {layer.shape}")
        if not np.isfinite(layer).all():
            raise ValueError(f"layer {i}: non-finite values; refusing to write")
    raw_id = image_id.encode("utf-8")
    parts = [
        BUNDLE_MAGIC,
        struct.pack("<I", BUNDLE_VERSION),
        struct.pack("<H", len(raw_id)),
        raw_id,
        struct.pack("<II", height, width),
        struct.pack("<BB", LABEL_CODES[label], len(layers)),
    ]
    for layer in layers:
        c, h, w = layer.shape
        parts.append(struct.pack("<III", c, h, w))
        parts.append(np.ascontiguousarray(layer, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(parts))


def write_manifest(path: str, entries: list[tuple[str, str, str | None]]) -> None:
    """Entries are (bundle_path, label, mask_path or None), written in order."""
    lines = []
    for bundle_path, label, mask_path in entries:
        cols = [bundle_path, label]
        if mask_path is not None:
            cols.append(mask_path)
        lines.append("\t".join(cols))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
