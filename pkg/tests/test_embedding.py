import numpy as np
import pytest

from lwinn.embedding import EmbeddingConfig, avg_pool, build_embedding, resize_map
from lwinn.storage import FeatureBundle

from oracles import bilinear_reference


class TestAvgPool:
    def test_spatial_shrink_64_to_62(self):
        # valid 3x3 pooling: the reference grid size for a 256-pixel input
        rng = np.random.default_rng(0)
        out = avg_pool(rng.standard_normal((4, 64, 64)).astype(np.float32), 3, 1)
        assert out.shape == (4, 62, 62)

    def test_constant_map_stays_constant(self):
        for c in (0.1, -2.5, 7.0):
            out = avg_pool(np.full((2, 6, 6), c, dtype=np.float32), 3, 1)
            assert np.all(out == np.float32(c))

    def test_three_by_three_mean(self):
        grid = np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3)
        out = avg_pool(grid, 3, 1)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 5.0

    def test_stride(self):
        rng = np.random.default_rng(1)
        grid = rng.standard_normal((1, 8, 8)).astype(np.float32)
        out = avg_pool(grid, 3, 2)
        assert out.shape == (1, 3, 3)
        expect = grid[0, 2:5, 4:7].mean(dtype=np.float64)
        assert out[0, 1, 2] == np.float32(expect)

    def test_too_small_raises(self):
        with pytest.raises(ValueError, match="smaller than pool kernel"):
            avg_pool(np.zeros((1, 2, 4), np.float32), 3, 1)


class TestResize:
    def test_identity_both_modes_bit_exact(self):
        rng = np.random.default_rng(2)
        grid = rng.standard_normal((3, 7, 5)).astype(np.float32)
        for mode in ("bilinear", "nearest"):
            out = resize_map(grid, (7, 5), mode)
            assert out.tobytes() == grid.tobytes()

    def test_single_cell_extends_constant(self):
        grid = np.array([[[3.25]]], dtype=np.float32)
        for mode in ("bilinear", "nearest"):
            out = resize_map(grid, (4, 4), mode)
            assert out.shape == (1, 4, 4)
            assert np.all(out == np.float32(3.25))

    def test_bilinear_2x2_to_4x4_frozen_table(self):
        # half-pixel-center source coords per axis: [0, 0.25, 0.75, 1] after
        # clamping, so values follow v = 4y + 2x for corners [[0,2],[4,6]]
        grid = np.array([[[0.0, 2.0], [4.0, 6.0]]], dtype=np.float32)
        expected = np.array(
            [
                [0.0, 0.5, 1.5, 2.0],
                [1.0, 1.5, 2.5, 3.0],
                [3.0, 3.5, 4.5, 5.0],
                [4.0, 4.5, 5.5, 6.0],
            ],
            dtype=np.float32,
        )
        out = resize_map(grid, (4, 4), "bilinear")
        assert np.array_equal(out[0], expected)

    def test_bilinear_matches_reference_random(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            in_h, in_w = rng.integers(1, 9, size=2)
            out_h, out_w = rng.integers(1, 17, size=2)
            grid = rng.standard_normal((2, in_h, in_w)).astype(np.float32)
            got = resize_map(grid, (int(out_h), int(out_w)), "bilinear")
            for c in range(2):
                ref = bilinear_reference(grid[c], int(out_h), int(out_w))
                np.testing.assert_allclose(got[c], ref, atol=1e-6)

    def test_nearest_downscale_picks_containing_cell(self):
        grid = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        out = resize_map(grid, (2, 2), "nearest")
        # output centers 0.5, 1.5 map to source coords 1.0, 3.0 -> cells 1 and 3
        assert np.array_equal(out[0], np.array([[5.0, 7.0], [13.0, 15.0]], dtype=np.float32))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            resize_map(np.zeros((1, 2, 2), np.float32), (4, 4), "bicubic")


def make_bundle(layer_shapes, rng, image_id="img"):
    layers = [rng.standard_normal(s).astype(np.float32) for s in layer_shapes]
    return FeatureBundle(image_id, 256, 256, layers)


class TestBuildEmbedding:
    def test_resnet18_style_shape(self):
        rng = np.random.default_rng(4)
        bundle = make_bundle([(64, 64, 64), (128, 32, 32), (256, 16, 16)], rng)
        emb = build_embedding(bundle, EmbeddingConfig())
        assert emb.data.shape == (448, 62, 62)
        assert (emb.height, emb.width) == (256, 256)

    def test_single_layer_no_pooling_is_identity(self):
        rng = np.random.default_rng(5)
        bundle = make_bundle([(8, 10, 10)], rng)
        cfg = EmbeddingConfig(pooling=False, layer_indices=(0,))
        emb = build_embedding(bundle, cfg)
        assert emb.data.tobytes() == bundle.layers[0].tobytes()

    def test_constant_layer_fills_constant_channels(self):
        rng = np.random.default_rng(6)
        top = rng.standard_normal((4, 12, 12)).astype(np.float32)
        const = np.full((6, 6, 6), 2.5, dtype=np.float32)
        bundle = FeatureBundle("c", 64, 64, [top, const])
        cfg = EmbeddingConfig(pooling=False, layer_indices=(0, 1))
        emb = build_embedding(bundle, cfg)
        assert emb.data.shape == (10, 12, 12)
        assert np.all(emb.data[4:] == np.float32(2.5))

    def test_channel_sum_bookkeeping(self):
        rng = np.random.default_rng(7)
        bundle = make_bundle([(5, 16, 16), (7, 8, 8), (11, 4, 4)], rng)
        for indices in [(0,), (0, 1), (0, 1, 2), (1, 2)]:
            cfg = EmbeddingConfig(layer_indices=indices)
            emb = build_embedding(bundle, cfg)
            assert emb.channels == sum(bundle.layers[i].shape[0] for i in indices)

    def test_channel_permutation_locality(self):
        rng = np.random.default_rng(8)
        bundle = make_bundle([(4, 12, 12), (6, 6, 6)], rng)
        cfg = EmbeddingConfig(layer_indices=(0, 1))
        base = build_embedding(bundle, cfg)
        perm = rng.permutation(6)
        permuted = FeatureBundle(
            "img", 256, 256, [bundle.layers[0], bundle.layers[1][perm]]
        )
        out = build_embedding(permuted, cfg)
        assert np.array_equal(out.data[:4], base.data[:4])
        assert np.array_equal(out.data[4:], base.data[4:][perm])

    def test_processing_commutes_with_channel_slicing(self):
        rng = np.random.default_rng(9)
        layer = rng.standard_normal((6, 10, 10)).astype(np.float32)
        whole = avg_pool(layer, 3, 1)
        stacked = np.concatenate([avg_pool(layer[i : i + 1], 3, 1) for i in range(6)])
        assert np.array_equal(whole, stacked)
        whole_r = resize_map(layer, (5, 7), "bilinear")
        stacked_r = np.concatenate(
            [resize_map(layer[i : i + 1], (5, 7), "bilinear") for i in range(6)]
        )
        assert np.array_equal(whole_r, stacked_r)

    def test_layer_index_out_of_range(self):
        rng = np.random.default_rng(10)
        bundle = make_bundle([(4, 8, 8)], rng)
        with pytest.raises(ValueError, match="out of range"):
            build_embedding(bundle, EmbeddingConfig(layer_indices=(0, 3)))

    def test_pool_kernel_too_large_for_layer(self):
        rng = np.random.default_rng(11)
        bundle = make_bundle([(4, 8, 8), (8, 2, 2)], rng)
        with pytest.raises(ValueError, match="layer 1"):
            build_embedding(bundle, EmbeddingConfig(layer_indices=(0, 1)))


class TestConfig:
    def test_fingerprint_stable_and_sensitive(self):
        a = EmbeddingConfig()
        b = EmbeddingConfig()
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != EmbeddingConfig(pooling=False).fingerprint()
        assert a.fingerprint() != EmbeddingConfig(interpolation="nearest").fingerprint()
        assert a.fingerprint() != EmbeddingConfig(layer_indices=(0, 1)).fingerprint()

    def test_validation(self):
        with pytest.raises(ValueError):
            EmbeddingConfig(pool_kernel=0).validate()
        with pytest.raises(ValueError):
            EmbeddingConfig(pool_stride=0).validate()
        with pytest.raises(ValueError):
            EmbeddingConfig(interpolation="area").validate()
        with pytest.raises(ValueError):
            EmbeddingConfig(layer_indices=()).validate()
