import colorsys
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from milhard.errors import ConfigError, DimensionError
from milhard.preprocess import (
    Patch,
    RasterImage,
    augment,
    dihedral,
    dihedral_inverse,
    equalize_channel,
    filter_patches,
    histogram_equalize,
    image_to_bag,
    otsu_threshold,
    patches_to_bag,
    read_pnm,
    rgb_to_hsv,
    rgb_to_hsv_array,
    tile_image,
    write_pnm,
)


def brute_otsu(hist):
    """Reference scan from the class-mean definition, in exact rationals, one threshold at a time."""
    hist = [Fraction(int(c)) for c in hist]
    total = sum(hist)
    best_t, best_var = 0, Fraction(-1)
    for t in range(256):
        n0 = sum(hist[: t + 1])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            var = Fraction(0)
        else:
            mu0 = sum(i * hist[i] for i in range(t + 1)) / n0
            mu1 = sum(i * hist[i] for i in range(t + 1, 256)) / n1
            var = (n0 / total) * (n1 / total) * (mu0 - mu1) ** 2
        if var > best_var:
            best_t, best_var = t, var
    return best_t, best_var


class TestTiling:
    def test_counts(self):
        img = RasterImage(np.zeros((768, 896, 3), dtype=np.uint8))
        assert len(tile_image(img, 32)) == 28 * 24

    def test_exact_fit_and_degenerate(self):
        assert [p.source_offset for p in tile_image(RasterImage(np.zeros((27, 27))), 27)] == [(0, 0)]
        assert tile_image(RasterImage(np.zeros((10, 10))), 27) == []

    def test_partition_of_covered_region(self):
        data = np.arange(7 * 9, dtype=np.uint8).reshape(7, 9)
        patches = tile_image(RasterImage(data), 3)
        covered = np.zeros((7, 9), dtype=int)
        for p in patches:
            r, c = p.source_offset
            covered[r:r + 3, c:c + 3] += 1
            assert np.array_equal(p.data[..., 0], data[r:r + 3, c:c + 3])
        assert covered[:6, :9].min() == 1 and covered.max() == 1
        assert covered[6:].sum() == 0
        # row-major order
        assert [p.source_offset for p in patches[:4]] == [(0, 0), (0, 3), (0, 6), (3, 0)]


class TestHSV:
    def test_examples(self):
        assert rgb_to_hsv(255, 0, 0) == (0.0, 1.0, 1.0)
        assert rgb_to_hsv(128, 128, 128) == (0.0, 0.0, 128 / 255)
        h, s, v = rgb_to_hsv(0, 128, 255)
        assert (s, v) == (1.0, 1.0)
        assert h == pytest.approx(209.882, abs=1e-3)

    def test_matches_colorsys(self, rng):
        rgb = rng.integers(0, 256, size=(500, 3))
        ours = rgb_to_hsv_array(rgb.astype(np.uint8))
        for (r, g, b), (h, s, v) in zip(rgb, ours):
            ref = colorsys.rgb_to_hsv(r / 255, g / 255, b / 255)
            assert h == pytest.approx(ref[0] * 360, abs=1e-9)
            assert s == pytest.approx(ref[1], abs=1e-12)
            assert v == pytest.approx(ref[2], abs=1e-12)


class TestOtsu:
    def test_single_level(self):
        h = np.zeros(256)
        h[50] = 7
        r = otsu_threshold(h)
        assert (r.threshold, r.between_class_variance) == (50, 0.0)

    def test_two_spikes_tie(self):
        h = np.zeros(256)
        h[50] = h[150] = 100
        assert otsu_threshold(h).threshold == 50

    def test_plateau_ties_resolve_to_smallest(self, rng):
        # two occupied levels: every t between them scores the same variance
        for _ in range(50):
            lo, hi = sorted(rng.choice(256, size=2, replace=False))
            h = np.zeros(256)
            h[lo], h[hi] = rng.integers(1, 10**6, size=2)
            assert otsu_threshold(h).threshold == lo

    def test_fractional_counts(self):
        h = np.zeros(256)
        h[[3, 90, 200]] = [0.5, 0.125, 2.75]
        assert otsu_threshold(h).threshold == otsu_threshold(h * 8).threshold

    def test_unequal_spikes(self):
        h = np.zeros(256, dtype=int)
        h[10], h[200] = 100, 300
        assert otsu_threshold(h).threshold == brute_otsu(list(h))[0] == 10

    def test_random_against_brute_force(self, rng):
        for _ in range(40):
            h = rng.integers(0, 50, size=256) * (rng.random(256) < 0.3)
            if h.sum() == 0:
                continue
            r = otsu_threshold(h)
            t, var = brute_otsu(h.tolist())
            assert r.threshold == t
            assert r.between_class_variance == pytest.approx(float(var), rel=1e-12)

    def test_errors(self):
        with pytest.raises(ConfigError):
            otsu_threshold(np.zeros(256))
        with pytest.raises(DimensionError):
            otsu_threshold(np.ones(10))


class TestFilter:
    thresholds = np.array([0, 100, 0])

    def test_gray_dropped_and_saturated_kept(self):
        gray = Patch(np.full((4, 4, 3), 128, dtype=np.uint8), (0, 0))
        red = Patch(np.tile(np.array([255, 0, 0], dtype=np.uint8), (4, 4, 1)), (0, 4))
        assert filter_patches([gray, red], self.thresholds) == [red]

    def test_fraction_boundary(self):
        data = np.full((10, 10, 3), 128, dtype=np.uint8)
        data.reshape(-1, 3)[:30] = (255, 0, 0)
        p = Patch(data, (0, 0))
        assert filter_patches([p], self.thresholds, min_tissue=0.25) == [p]
        assert filter_patches([p], self.thresholds, min_tissue=0.35) == []


class TestEqualize:
    def test_constant(self):
        p = Patch(np.full((3, 3, 1), 77, dtype=np.uint8), (0, 0))
        assert np.array_equal(histogram_equalize(p).data, p.data)

    def test_full_range(self):
        assert equalize_channel(np.array([0, 255])).tolist() == [0, 255]

    def test_two_levels(self):
        # cdf = (2, 4), cdf_min = 2, N = 4: level 10 -> 0, level 20 -> 255
        assert equalize_channel(np.array([10, 10, 20, 20])).tolist() == [0, 0, 255, 255]

    @settings(max_examples=80, deadline=None)
    @given(arrays(np.uint8, st.integers(2, 64)))
    def test_idempotent_up_to_rounding(self, v):
        once = equalize_channel(v)
        twice = equalize_channel(once)
        h1 = np.bincount(once, minlength=256)
        h2 = np.bincount(twice, minlength=256)
        assert np.abs(h1 - h2).max() <= 1


class TestDihedral:
    def test_rotate_180(self):
        a = np.array([[1, 2], [3, 4]])
        assert dihedral(a, 2).tolist() == [[4, 3], [2, 1]]

    def test_identity(self):
        a = np.arange(9).reshape(3, 3)
        assert np.array_equal(dihedral(a, 0), a)

    def test_eight_distinct_transforms(self):
        a = np.arange(9).reshape(3, 3)
        assert len({dihedral(a, c).tobytes() for c in range(8)}) == 8

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3]))),
           st.integers(0, 7))
    def test_inverse_and_multiset(self, a, code):
        out = dihedral(a, code)
        assert np.array_equal(dihedral_inverse(out, code), a)
        assert np.array_equal(np.sort(out, axis=None), np.sort(a, axis=None))

    def test_augment_deterministic(self):
        p = Patch(np.arange(16, dtype=np.uint8).reshape(4, 4, 1), (0, 0))
        a = augment(p, np.random.default_rng(3))
        b = augment(p, np.random.default_rng(3))
        assert np.array_equal(a.data, b.data)
        with pytest.raises(DimensionError):
            augment(Patch(np.zeros((2, 3, 1), dtype=np.uint8), (0, 0)), np.random.default_rng(0))


class TestBags:
    def test_scaling(self):
        p = Patch(np.array([[0, 255], [0, 255]], dtype=np.uint8)[..., None], (0, 0))
        bag = patches_to_bag([p], 1)
        assert bag.instances.tolist() == [[0.0, 1.0, 0.0, 1.0]]

    def test_order_and_length(self):
        a = Patch(np.zeros((27, 27, 3), dtype=np.uint8), (0, 0))
        b = Patch(np.full((27, 27, 3), 255, dtype=np.uint8), (0, 27))
        bag = patches_to_bag([a, b], 0)
        assert bag.instances.shape == (2, 2187)
        assert bag.instances[0].max() == 0 and bag.instances[1].min() == 1

    def test_empty(self):
        with pytest.raises(ConfigError, match="empty bag"):
            patches_to_bag([], 0)

    def test_image_to_bag_keeps_tissue(self):
        img = np.full((54, 54, 3), 240, dtype=np.uint8)
        img[:27, :27] = (180, 60, 140)
        bag = image_to_bag(RasterImage(img), 1, "slide", patch_side=27)
        assert bag.size == 1


def test_pnm_round_trip(tmp_path, rng):
    for shape in [(5, 7, 3), (4, 6, 1)]:
        img = RasterImage(rng.integers(0, 256, size=shape, dtype=np.uint8))
        path = tmp_path / "x.pnm"
        write_pnm(img, path)
        assert np.array_equal(read_pnm(path).data, img.data)


def test_pnm_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 1\n255\n\x05\xfa")
    assert read_pnm(path).data[..., 0].tolist() == [[5, 250]]
