"""Feature bundle files, dataset manifests, and the shared binary container helpers.

All on-disk tensors are little-endian float32, row-major. Bundle files carry the
magic ``LWNB``; the bank (``LWNK``) and score-map (``LWNM``) containers in
:mod:`lwinn.search` and :mod:`lwinn.postprocess` reuse the header helpers here.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

BUNDLE_MAGIC = b"LWNB"
BUNDLE_VERSION = 1

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"
LABEL_UNKNOWN = "unknown"

_LABEL_TO_CODE = {LABEL_NORMAL: 0, LABEL_ANOMALOUS: 1, LABEL_UNKNOWN: 2}
_CODE_TO_LABEL = {v: k for k, v in _LABEL_TO_CODE.items()}


class StorageError(Exception):
    """Base class for bundle/manifest I/O failures."""


class FormatError(StorageError):
    """File does not start with the expected magic/version."""


class CorruptionError(StorageError):
    """Declared dims disagree with the payload actually present."""


class ValidationError(StorageError):
    """Payload parses but violates a tensor invariant (NaN/Inf, bad dims)."""


@dataclass
class FeatureBundle:
    """Per-image raw feature maps plus the metadata the pipeline needs downstream.

    ``layers`` are float32 arrays of shape (C_i, H_i, W_i), ordered
    shallowest-first with non-increasing spatial size. ``mask_path`` is
    manifest-carried metadata: it is attached when loading through a manifest
    and is not part of the bundle file itself.
    """

    image_id: str
    height: int
    width: int
    layers: list[np.ndarray]
    label: str = LABEL_UNKNOWN
    mask_path: str | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.height == other.height
            and self.width == other.width
            and self.label == other.label
            and self.mask_path == other.mask_path
            and len(self.layers) == len(other.layers)
            and all(
                a.shape == b.shape and np.array_equal(a, b)
                for a, b in zip(self.layers, other.layers)
            )
        )


@dataclass
class ManifestEntry:
    bundle_path: str
    label: str
    mask_path: str | None = None


@dataclass
class DatasetManifest:
    """One split of a dataset: an ordered list of bundle references.

    Paths are stored as written in the manifest file; ``base_dir`` (the
    manifest's directory) is used to resolve relative ones.
    """

    split: str
    entries: list[ManifestEntry]
    category: str = "default"
    base_dir: str = "."

    def resolve(self, path: str) -> str:
        if os.path.isabs(path):
            return path
        return os.path.join(self.base_dir, path)


def check_tensor(arr: np.ndarray, *, what: str = "tensor") -> None:
    """Raise ValidationError unless ``arr`` is a finite float32 array with 1-4 axes."""
    if arr.dtype != np.float32:
        raise ValidationError(f"{what}: dtype must be float32, got {arr.dtype}")
    if not 1 <= arr.ndim <= 4:
        raise ValidationError(f"{what}: expected 1-4 axes, got {arr.ndim}")
    if any(d <= 0 for d in arr.shape):
        raise ValidationError(f"{what}: dims must be positive, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{what}: contains NaN or Inf values")


def check_bundle(bundle: FeatureBundle) -> None:
    """Raise ValidationError unless ``bundle`` satisfies all invariants."""
    if bundle.label not in _LABEL_TO_CODE:
        raise ValidationError(f"unknown label {bundle.label!r}")
    if bundle.height <= 0 or bundle.width <= 0:
        raise ValidationError(
            f"image size must be positive, got {bundle.height}x{bundle.width}"
        )
    if not bundle.layers:
        raise ValidationError("bundle has no layers")
    prev_h = prev_w = None
    for i, layer in enumerate(bundle.layers):
        check_tensor(layer, what=f"layer {i}")
        if layer.ndim != 3:
            raise ValidationError(f"layer {i}: expected (C, H, W), got {layer.shape}")
        _, h, w = layer.shape
        if prev_h is not None and (h > prev_h or w > prev_w):
            raise ValidationError(
                f"layer {i}: spatial size {h}x{w} exceeds previous layer "
                f"{prev_h}x{prev_w}; layers must be ordered shallowest-first"
            )
        prev_h, prev_w = h, w


def _atomic_write(path: str, payload: bytes) -> None:
    """Write bytes to ``path`` via temp file + rename so readers never see a partial file."""
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


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValidationError(f"string too long for u16 length prefix: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    """Cursor over a byte buffer with typed little-endian reads."""

    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(
                f"{self.path}: truncated file (needed {n} bytes at offset {self.pos})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        n = self.u16()
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptionError(f"{self.path}: undecodable string field: {exc}") from exc

    def floats(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float32, copy=True)


def check_magic(reader: _Reader, magic: bytes, version: int) -> None:
    got = reader.take(4)
    if got != magic:
        raise FormatError(f"{reader.path}: bad magic {got!r}, expected {magic!r}")
    ver = reader.u32()
    if ver != version:
        raise FormatError(f"{reader.path}: unsupported format version {ver}")


def write_bundle(bundle: FeatureBundle, path: str) -> None:
    """Serialize ``bundle`` to ``path`` atomically in the LWNB format."""
    check_bundle(bundle)
    if len(bundle.layers) > 0xFF:
        raise ValidationError(f"too many layers: {len(bundle.layers)}")
    parts = [
        BUNDLE_MAGIC,
        struct.pack("<I", BUNDLE_VERSION),
        _pack_str(bundle.image_id),
        struct.pack("<II", bundle.height, bundle.width),
        struct.pack("<BB", _LABEL_TO_CODE[bundle.label], len(bundle.layers)),
    ]
    for layer in bundle.layers:
        c, h, w = layer.shape
        parts.append(struct.pack("<III", c, h, w))
        parts.append(np.ascontiguousarray(layer, dtype="<f4").tobytes())
    try:
        _atomic_write(path, b"".join(parts))
    except OSError as exc:
        raise StorageError(f"cannot write bundle to {path}: {exc}") from exc


@dataclass
class BundleHeader:
    image_id: str
    height: int
    width: int
    label: str
    layer_dims: list[tuple[int, int, int]] = field(default_factory=list)


def read_bundle_header(path: str) -> BundleHeader:
    """Read bundle metadata without loading layer payloads.

    Layer dims are interleaved with payloads in the file, so this still seeks
    through the file, but copies no tensor data.
    """
    try:
        with open(path, "rb") as fh:
            head = _HeaderScanner(fh, path)
            return head.scan()
    except OSError as exc:
        raise StorageError(f"cannot read bundle {path}: {exc}") from exc


class _HeaderScanner:
    """Streaming variant of _Reader used for header-only reads."""

    def __init__(self, fh, path: str):
        self.fh = fh
        self.path = path

    def take(self, n: int) -> bytes:
        out = self.fh.read(n)
        if len(out) != n:
            raise CorruptionError(f"{self.path}: truncated file")
        return out

    def scan(self) -> BundleHeader:
        if self.take(4) != BUNDLE_MAGIC:
            raise FormatError(f"{self.path}: not a bundle file")
        ver = struct.unpack("<I", self.take(4))[0]
        if ver != BUNDLE_VERSION:
            raise FormatError(f"{self.path}: unsupported format version {ver}")
        n = struct.unpack("<H", self.take(2))[0]
        try:
            image_id = self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptionError(f"{self.path}: undecodable image id: {exc}") from exc
        height, width = struct.unpack("<II", self.take(8))
        label_code, n_layers = struct.unpack("<BB", self.take(2))
        if label_code not in _CODE_TO_LABEL:
            raise FormatError(f"{self.path}: unknown label code {label_code}")
        dims = []
        for _ in range(n_layers):
            c, h, w = struct.unpack("<III", self.take(12))
            dims.append((c, h, w))
            self.fh.seek(4 * c * h * w, os.SEEK_CUR)
        return BundleHeader(image_id, height, width, _CODE_TO_LABEL[label_code], dims)


def read_bundle(path: str) -> FeatureBundle:
    """Parse an LWNB file, validating tensor invariants on the way in."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read bundle {path}: {exc}") from exc
    reader = _Reader(buf, path)
    check_magic(reader, BUNDLE_MAGIC, BUNDLE_VERSION)
    image_id = reader.string()
    height = reader.u32()
    width = reader.u32()
    label_code = reader.u8()
    if label_code not in _CODE_TO_LABEL:
        raise FormatError(f"{path}: unknown label code {label_code}")
    n_layers = reader.u8()
    layers = []
    for i in range(n_layers):
        c = reader.u32()
        h = reader.u32()
        w = reader.u32()
        if c == 0 or h == 0 or w == 0:
            raise ValidationError(f"{path}: layer {i} has zero-sized dims ({c},{h},{w})")
        data = reader.floats(c * h * w).reshape(c, h, w)
        if not np.isfinite(data).all():
            raise ValidationError(f"{path}: layer {i} contains NaN or Inf values")
        layers.append(data)
    if reader.pos != len(buf):
        raise CorruptionError(
            f"{path}: {len(buf) - reader.pos} trailing bytes after declared payload"
        )
    bundle = FeatureBundle(image_id, height, width, layers, _CODE_TO_LABEL[label_code])
    check_bundle(bundle)
    return bundle


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    lines = []
    for entry in manifest.entries:
        if entry.label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
            raise ValidationError(f"manifest labels must be normal/anomalous, got {entry.label!r}")
        cols = [entry.bundle_path, entry.label]
        if entry.mask_path is not None:
            cols.append(entry.mask_path)
        lines.append("\t".join(cols))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path: str, split: str, category: str = "default") -> DatasetManifest:
    """Parse the tab-separated manifest at ``path``.

    Lines: ``bundle_path<TAB>label[<TAB>mask_path]``; '#' starts a comment.
    """
    entries = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                cols = line.split("\t")
                if len(cols) not in (2, 3):
                    raise FormatError(
                        f"{path}:{lineno}: expected 2 or 3 tab-separated columns, got {len(cols)}"
                    )
                if cols[1] not in (LABEL_NORMAL, LABEL_ANOMALOUS):
                    raise FormatError(
                        f"{path}:{lineno}: label must be normal or anomalous, got {cols[1]!r}"
                    )
                mask = cols[2] if len(cols) == 3 and cols[2] else None
                entries.append(ManifestEntry(cols[0], cols[1], mask))
    except OSError as exc:
        raise StorageError(f"cannot read manifest {path}: {exc}") from exc
    return DatasetManifest(
        split=split,
        entries=entries,
        category=category,
        base_dir=os.path.dirname(os.path.abspath(path)),
    )


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Check a manifest against its split rules; violations come back as strings.

    Empty result means: every referenced path resolves, labels are consistent
    with the split, and all bundles in the split share identical per-layer
    channel counts.
    """
    violations: list[str] = []
    if manifest.split not in ("train", "test"):
        violations.append(f"unknown split {manifest.split!r}")
    reference_channels: list[int] | None = None
    reference_entry = ""
    for idx, entry in enumerate(manifest.entries):
        name = f"entry {idx} ({entry.bundle_path})"
        if manifest.split == "train" and entry.label != LABEL_NORMAL:
            violations.append(f"{name}: train split must be normal-only, got {entry.label!r}")
        bundle_path = manifest.resolve(entry.bundle_path)
        if not os.path.isfile(bundle_path):
            violations.append(f"{name}: bundle path does not resolve: {bundle_path}")
            continue
        if entry.mask_path is not None:
            mask_path = manifest.resolve(entry.mask_path)
            if not os.path.isfile(mask_path):
                violations.append(f"{name}: mask path does not resolve: {mask_path}")
        try:
            header = read_bundle_header(bundle_path)
        except StorageError as exc:
            violations.append(f"{name}: unreadable bundle: {exc}")
            continue
        channels = [c for c, _, _ in header.layer_dims]
        if reference_channels is None:
            reference_channels = channels
            reference_entry = name
        elif channels != reference_channels:
            violations.append(
                f"{name}: per-layer channel counts {channels} differ "
                f"from {reference_entry} {reference_channels}"
            )
    return violations
