import os
import struct

import numpy as np
import pytest

from lwinn.storage import (
    CorruptionError,
    DatasetManifest,
    FeatureBundle,
    FormatError,
    ManifestEntry,
    StorageError,
    ValidationError,
    read_bundle,
    read_bundle_header,
    read_manifest,
    validate_manifest,
    write_bundle,
    write_manifest,
)


def make_bundle(rng, image_id="img", label="normal"):
    layers = [
        rng.standard_normal((4, 8, 8)).astype(np.float32),
        rng.standard_normal((8, 4, 4)).astype(np.float32),
    ]
    return FeatureBundle(image_id, 32, 32, layers, label)


def test_round_trip_identity(tmp_path):
    rng = np.random.default_rng(0)
    bundle = make_bundle(rng, "round/trip:id", "anomalous")
    path = str(tmp_path / "b.lwnb")
    write_bundle(bundle, path)
    loaded = read_bundle(path)
    assert loaded == bundle
    for a, b in zip(loaded.layers, bundle.layers):
        assert a.tobytes() == b.tobytes()  # bit-level float equality


def test_round_trip_all_labels(tmp_path):
    rng = np.random.default_rng(1)
    for label in ("normal", "anomalous", "unknown"):
        bundle = make_bundle(rng, label=label)
        path = str(tmp_path / f"{label}.lwnb")
        write_bundle(bundle, path)
        assert read_bundle(path).label == label


def test_bad_magic_is_format_error(tmp_path):
    path = tmp_path / "bad.lwnb"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError):
        read_bundle(str(path))


def test_bad_version_is_format_error(tmp_path):
    path = tmp_path / "bad.lwnb"
    path.write_bytes(b"LWNB" + struct.pack("<I", 999) + b"\x00" * 16)
    with pytest.raises(FormatError):
        read_bundle(str(path))


def test_truncated_payload_is_corruption_error(tmp_path):
    rng = np.random.default_rng(2)
    bundle = FeatureBundle("t", 16, 16, [rng.standard_normal((64, 8, 8)).astype(np.float32)])
    path = str(tmp_path / "t.lwnb")
    write_bundle(bundle, path)
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:-4])  # drop one float
    with pytest.raises(CorruptionError):
        read_bundle(path)


def test_trailing_bytes_is_corruption_error(tmp_path):
    rng = np.random.default_rng(3)
    bundle = make_bundle(rng)
    path = str(tmp_path / "t.lwnb")
    write_bundle(bundle, path)
    with open(path, "ab") as fh:
        fh.write(b"XX")
    with pytest.raises(CorruptionError):
        read_bundle(path)


def test_nan_payload_is_validation_error_naming_layer(tmp_path):
    rng = np.random.default_rng(4)
    bundle = make_bundle(rng)
    path = str(tmp_path / "n.lwnb")
    write_bundle(bundle, path)
    raw = bytearray(open(path, "rb").read())
    # corrupt one float of layer 1's payload (layer 0 occupies the first 4*8*8*4 bytes)
    offset = len(raw) - 4
    raw[offset : offset + 4] = struct.pack("<f", float("nan"))
    open(path, "wb").write(bytes(raw))
    with pytest.raises(ValidationError, match="layer 1"):
        read_bundle(path)


def test_write_rejects_nan_input(tmp_path):
    layer = np.full((1, 2, 2), np.nan, dtype=np.float32)
    bundle = FeatureBundle("x", 8, 8, [layer])
    with pytest.raises(ValidationError):
        write_bundle(bundle, str(tmp_path / "x.lwnb"))


def test_write_rejects_growing_layers(tmp_path):
    layers = [np.zeros((2, 4, 4), np.float32), np.zeros((2, 8, 8), np.float32)]
    bundle = FeatureBundle("x", 8, 8, layers)
    with pytest.raises(ValidationError):
        write_bundle(bundle, str(tmp_path / "x.lwnb"))


def test_write_io_failure_carries_path(tmp_path):
    rng = np.random.default_rng(5)
    bundle = make_bundle(rng)
    target = str(tmp_path / "no" / "such" / "dir" / "x.lwnb")
    with pytest.raises(StorageError, match="x.lwnb"):
        write_bundle(bundle, target)


def test_sequential_writes_second_wins(tmp_path):
    rng = np.random.default_rng(6)
    first = make_bundle(rng, "first")
    second = make_bundle(rng, "second")
    path = str(tmp_path / "same.lwnb")
    write_bundle(first, path)
    write_bundle(second, path)
    assert read_bundle(path).image_id == "second"
    # atomic write leaves no temp droppings behind
    assert os.listdir(tmp_path) == ["same.lwnb"]


def test_endianness_pinned(tmp_path):
    layer = np.array([[[1.0]]], dtype=np.float32)
    bundle = FeatureBundle("e", 4, 4, [layer])
    path = str(tmp_path / "e.lwnb")
    write_bundle(bundle, path)
    raw = open(path, "rb").read()
    assert raw[-4:] == struct.pack("<f", 1.0)  # little-endian on every platform


def test_header_read_matches_full_read(tmp_path):
    rng = np.random.default_rng(7)
    bundle = make_bundle(rng, "hdr", "anomalous")
    path = str(tmp_path / "h.lwnb")
    write_bundle(bundle, path)
    header = read_bundle_header(path)
    assert header.image_id == "hdr"
    assert header.label == "anomalous"
    assert header.layer_dims == [(4, 8, 8), (8, 4, 4)]
    assert (header.height, header.width) == (32, 32)


def write_bundles(tmp_path, rng, count, channels=(4, 8)):
    paths = []
    for i in range(count):
        layers = [
            rng.standard_normal((c, 8 // (j + 1), 8 // (j + 1))).astype(np.float32)
            for j, c in enumerate(channels)
        ]
        bundle = FeatureBundle(f"img{i}", 32, 32, layers)
        path = str(tmp_path / f"img{i}.lwnb")
        write_bundle(bundle, path)
        paths.append(path)
    return paths


def test_manifest_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    paths = write_bundles(tmp_path, rng, 2)
    manifest = DatasetManifest(
        split="test",
        entries=[
            ManifestEntry(os.path.basename(paths[0]), "normal"),
            ManifestEntry(os.path.basename(paths[1]), "anomalous", "mask1.png"),
        ],
    )
    mpath = str(tmp_path / "m.tsv")
    write_manifest(manifest, mpath)
    loaded = read_manifest(mpath, split="test")
    assert [e.bundle_path for e in loaded.entries] == [e.bundle_path for e in manifest.entries]
    assert loaded.entries[1].mask_path == "mask1.png"
    assert loaded.entries[0].mask_path is None


def test_manifest_comments_and_blanks(tmp_path):
    mpath = tmp_path / "m.tsv"
    mpath.write_text("# comment\n\nb.lwnb\tnormal\n")
    loaded = read_manifest(str(mpath), split="train")
    assert len(loaded.entries) == 1


def test_validate_clean_manifest(tmp_path):
    rng = np.random.default_rng(9)
    paths = write_bundles(tmp_path, rng, 3)
    manifest = DatasetManifest(
        split="train",
        entries=[ManifestEntry(p, "normal") for p in paths],
        base_dir=str(tmp_path),
    )
    assert validate_manifest(manifest) == []


def test_validate_flags_anomalous_in_train(tmp_path):
    rng = np.random.default_rng(10)
    paths = write_bundles(tmp_path, rng, 1)
    manifest = DatasetManifest(
        split="train",
        entries=[ManifestEntry(paths[0], "anomalous")],
        base_dir=str(tmp_path),
    )
    violations = validate_manifest(manifest)
    assert len(violations) == 1
    assert "normal-only" in violations[0]


def test_validate_flags_channel_mismatch(tmp_path):
    rng = np.random.default_rng(11)
    a = write_bundles(tmp_path, rng, 1, channels=(64,))
    rng2 = np.random.default_rng(12)
    layers = [rng2.standard_normal((32, 8, 8)).astype(np.float32)]
    other = FeatureBundle("other", 32, 32, layers)
    b = str(tmp_path / "other.lwnb")
    write_bundle(other, b)
    manifest = DatasetManifest(
        split="train",
        entries=[ManifestEntry(a[0], "normal"), ManifestEntry(b, "normal")],
        base_dir=str(tmp_path),
    )
    violations = validate_manifest(manifest)
    assert len(violations) == 1
    assert "entry 0" in violations[0] and "entry 1" in violations[0]


def test_validate_flags_missing_paths(tmp_path):
    manifest = DatasetManifest(
        split="test",
        entries=[ManifestEntry("missing.lwnb", "anomalous", "missing.png")],
        base_dir=str(tmp_path),
    )
    violations = validate_manifest(manifest)
    assert any("bundle path" in v for v in violations)


def test_reader_total_under_corruption(tmp_path):
    # every truncation and every single-byte header flip raises a typed
    # storage error; nothing escapes as a stray exception type
    rng = np.random.default_rng(13)
    bundle = make_bundle(rng, "fuzz")
    path = str(tmp_path / "f.lwnb")
    write_bundle(bundle, path)
    raw = open(path, "rb").read()
    for cut in range(0, len(raw), 97):
        open(path, "wb").write(raw[:cut])
        with pytest.raises(StorageError):
            read_bundle(path)
    header_len = 4 + 4 + 2 + 4 + 8 + 2  # through the first layer dims
    for pos in range(header_len):
        for flip in (0x01, 0xFF):
            mutated = bytearray(raw)
            mutated[pos] ^= flip
            open(path, "wb").write(bytes(mutated))
            try:
                read_bundle(path)
            except StorageError:
                pass
