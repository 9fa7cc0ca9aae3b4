import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphseg import imaging
from graphseg.imaging import (ImagingError, SuperpixelMap, channel_features,
                              hierarchical_merge, load_superpixel_map,
                              normalize_stain, region_color_features,
                              save_superpixel_map, slic)


def uniform_image(h, w, color):
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[:] = color
    return img


class TestNormalizeStain:
    def test_identity_when_stats_match(self, rng):
        img = rng.integers(0, 256, (32, 32, 3)).astype(np.uint8)
        means = img.reshape(-1, 3).mean(axis=0)
        stds = img.reshape(-1, 3).std(axis=0)
        out = normalize_stain(img, means, stds)
        assert np.all(np.abs(out.astype(int) - img.astype(int)) <= 1)

    def test_constant_image_shifts_to_ref_mean(self):
        img = uniform_image(16, 16, (100, 100, 100))
        out = normalize_stain(img, (150, 120, 90), (10, 10, 10))
        assert np.all(out[:, :, 0] == 150)
        assert np.all(out[:, :, 1] == 120)
        assert np.all(out[:, :, 2] == 90)

    def test_random_image_matches_target_stats(self, rng):
        img = rng.integers(0, 256, (64, 64, 3)).astype(np.uint8)
        out = normalize_stain(img, (128, 128, 128), (30, 30, 30)).astype(np.float64)
        for c in range(3):
            assert 127 <= out[:, :, c].mean() <= 129
            assert 29 <= out[:, :, c].std() <= 31

    def test_idempotent_within_quantization(self, rng):
        img = rng.integers(0, 256, (48, 48, 3)).astype(np.uint8)
        once = normalize_stain(img, (120, 130, 140), (25, 25, 25))
        twice = normalize_stain(once, (120, 130, 140), (25, 25, 25))
        assert np.all(np.abs(once.astype(int) - twice.astype(int)) <= 1)

    def test_rejects_nonpositive_ref_std(self):
        with pytest.raises(ImagingError):
            normalize_stain(uniform_image(4, 4, (1, 2, 3)), (0, 0, 0), (0, 1, 1))


class TestSlic:
    def test_single_segment(self):
        sp = slic(uniform_image(10, 12, (40, 80, 20)), 1)
        assert sp.num_segments == 1
        assert np.all(sp.labels == 0)

    def test_uniform_image_quadrants(self):
        sp = slic(uniform_image(100, 100, (120, 120, 120)), 4, 10.0, 10)
        assert sp.num_segments == 4
        areas = np.bincount(sp.labels.ravel())
        assert np.all(areas >= 2000) and np.all(areas <= 3000)

    def test_two_color_split(self):
        img = np.zeros((100, 100, 3), dtype=np.uint8)
        img[:, :50] = (255, 0, 0)
        img[:, 50:] = (0, 0, 255)
        sp = slic(img, 2, 10.0, 10)
        assert sp.num_segments == 2
        good_rows = 0
        for r in range(100):
            boundaries = np.nonzero(np.diff(sp.labels[r]))[0]
            if len(boundaries) == 1 and abs(boundaries[0] + 1 - 50) <= 2:
                good_rows += 1
        assert good_rows >= 95

    def test_too_many_segments(self):
        with pytest.raises(ImagingError, match="too many segments"):
            slic(uniform_image(4, 4, (0, 0, 0)), 17)

    def test_labels_contiguous_and_connected(self, rng):
        img = rng.integers(0, 256, (40, 60, 3)).astype(np.uint8)
        sp = slic(img, 12)
        sp.validate()
        assert sp.num_segments <= 12

    def test_deterministic(self, rng):
        img = rng.integers(0, 256, (30, 30, 3)).astype(np.uint8)
        a = slic(img, 6)
        b = slic(img, 6)
        assert np.array_equal(a.labels, b.labels)


class TestColorFeatures:
    def test_constant_region(self):
        img = uniform_image(4, 4, (128, 128, 128))
        feats = region_color_features(img, np.ones((4, 4), dtype=bool))
        assert feats.shape == (39,)
        for c in range(3):
            block = feats[13 * c:13 * (c + 1)]
            expected_bins = np.zeros(8)
            expected_bins[4] = 1.0
            assert np.allclose(block[:8], expected_bins)
            assert block[8] == 128  # mean
            assert block[9] == 0  # std
            assert block[10] == 128  # median
            assert block[11] == 1.0  # energy
            assert block[12] == 0  # skewness

    def test_two_extreme_pixels(self):
        img = np.zeros((1, 2, 3), dtype=np.uint8)
        img[0, 1] = 255
        feats = region_color_features(img, np.ones((1, 2), dtype=bool))
        for c in range(3):
            block = feats[13 * c:13 * (c + 1)]
            assert block[0] == 0.5 and block[7] == 0.5
            assert np.allclose(block[1:7], 0)
            assert block[8] == 127.5
            assert block[9] == 127.5
            assert block[11] == 0.5
            assert block[12] == 0

    def test_empty_region_rejected(self):
        with pytest.raises(ImagingError, match="empty region"):
            region_color_features(uniform_image(2, 2, (0, 0, 0)), np.zeros((2, 2), bool))

    def test_histogram_fractions_sum_to_one(self, rng):
        values = rng.integers(0, 256, 57)
        feats = channel_features(values)
        assert abs(feats[:8].sum() - 1.0) < 1e-9

    @given(st.lists(st.integers(0, 255), min_size=1, max_size=40), st.randoms())
    @settings(max_examples=50, deadline=None)
    def test_permutation_invariant(self, values, pyrandom):
        shuffled = list(values)
        pyrandom.shuffle(shuffled)
        a = channel_features(np.array(values))
        b = channel_features(np.array(shuffled))
        assert np.allclose(a, b)


class TestHierarchicalMerge:
    def two_segment_map(self):
        labels = np.zeros((4, 8), dtype=np.int32)
        labels[:, 4:] = 1
        return SuperpixelMap(labels, 2)

    def test_identical_colors_merge(self):
        img = uniform_image(4, 8, (60, 60, 60))
        out = hierarchical_merge(img, self.two_segment_map(), 0.5, 10)
        assert out.num_segments == 1

    def test_dissimilar_colors_kept(self):
        img = np.zeros((4, 8, 3), dtype=np.uint8)
        img[:, :4] = (255, 0, 0)
        img[:, 4:] = (0, 0, 255)
        out = hierarchical_merge(img, self.two_segment_map(), 0.01, 10)
        assert out.num_segments == 2

    def test_node_budget_forces_merging(self):
        img = uniform_image(2, 8, (80, 80, 80))
        labels = np.repeat(np.arange(4, dtype=np.int32), 2)[None, :].repeat(2, axis=0)
        out = hierarchical_merge(img, SuperpixelMap(labels, 4), 0.0, 1)
        assert out.num_segments == 1

    def test_monotone_and_contiguous(self, rng):
        img = rng.integers(0, 256, (20, 20, 3)).astype(np.uint8)
        sp = slic(img, 8)
        out = hierarchical_merge(img, sp, 0.3, 3)
        assert out.num_segments <= sp.num_segments
        out.validate()

    def test_refinement_only_coarsens(self, rng):
        img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        sp = slic(img, 6)
        out = hierarchical_merge(img, sp, 0.5, 2)
        # every original segment maps into exactly one merged segment
        for seg in range(sp.num_segments):
            assert len(np.unique(out.labels[sp.labels == seg])) == 1


class TestSuperpixelIO:
    def test_roundtrip(self, tmp_path, rng):
        img = rng.integers(0, 256, (24, 24, 3)).astype(np.uint8)
        sp = slic(img, 5)
        path = str(tmp_path / "sp.png")
        save_superpixel_map(sp, path)
        loaded = load_superpixel_map(path)
        assert loaded.num_segments == sp.num_segments
        assert np.array_equal(loaded.labels, sp.labels)

    def test_image_roundtrip(self, tmp_path, rng):
        img = rng.integers(0, 256, (10, 14, 3)).astype(np.uint8)
        path = str(tmp_path / "img.png")
        imaging.write_image(img, path)
        assert np.array_equal(imaging.read_image(path), img)
