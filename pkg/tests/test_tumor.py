import math

import numpy as np
import pytest

from padkit.imagekit import InvalidParameterError, LabelGrid2D, ScalarGrid2D, UNIT_SUV
from padkit.stats import dice
from padkit.tumor import (
    InsertionError,
    LumpyParams,
    PlacementError,
    TumorSpec,
    gaussian_lumpy,
    insert_tumor,
    lesion_increment,
    lumpy_mean_expectation,
    make_tumor_mask,
    sample_tumor_spec,
    threshold_segment,
)


def suv(values):
    return ScalarGrid2D(np.asarray(values, dtype=float), unit=UNIT_SUV)


def spec(center=(16.0, 16.0), radii=(6.0, 5.0), rotation=0.3, sbr=4.0,
         magnitude=0.0, psf=0.0):
    return TumorSpec(center=center, radii=radii, rotation=rotation, sbr=sbr,
                     lumpy=LumpyParams(mean_lump_count=20.0, lump_sigma=1.0,
                                       magnitude=max(magnitude, 1e-300) if magnitude else 1e-300),
                     psf_fwhm=psf)


class TestGaussianLumpy:
    def test_zero_magnitude(self):
        params = LumpyParams(mean_lump_count=30.0, lump_sigma=2.0, magnitude=0.0)
        field = gaussian_lumpy((16, 16), params, np.random.default_rng(0))
        np.testing.assert_array_equal(field, 0.0)

    def test_seed_determinism(self):
        params = LumpyParams(mean_lump_count=30.0, lump_sigma=2.0, magnitude=1.5)
        a = gaussian_lumpy((16, 16), params, np.random.default_rng(5))
        b = gaussian_lumpy((16, 16), params, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_empirical_mean_matches_expectation(self):
        # interior-dominated regime: sigma much smaller than the grid
        params = LumpyParams(mean_lump_count=60.0, lump_sigma=1.0, magnitude=0.8)
        shape = (64, 64)
        want = lumpy_mean_expectation(shape, params)
        means = [gaussian_lumpy(shape, params, np.random.default_rng(seed)).mean()
                 for seed in range(500)]
        assert abs(np.mean(means) - want) / want < 0.05

    def test_expectation_formula(self):
        params = LumpyParams(mean_lump_count=10.0, lump_sigma=2.0, magnitude=3.0)
        want = 10.0 * 3.0 * 2 * math.pi * 4.0 / (32 * 32)
        assert lumpy_mean_expectation((32, 32), params) == pytest.approx(want)


class TestTumorMask:
    def test_circle_membership(self):
        # pixel centers within Euclidean distance 1.5 of the center:
        # the 3x3 block (diagonals sit at sqrt(2) < 1.5)
        mask = make_tumor_mask((9, 9), spec(center=(4.0, 4.0), radii=(1.5, 1.5), rotation=0.0))
        assert mask.labels.sum() == 9
        got = np.argwhere(mask.labels)
        assert got.min() == 3 and got.max() == 5

    def test_unit_circle_is_plus(self):
        mask = make_tumor_mask((9, 9), spec(center=(4.0, 4.0), radii=(1.0, 1.0), rotation=0.0))
        assert mask.labels.sum() == 5
        assert mask.labels[4, 4] == 1 and mask.labels[3, 4] == 1 and mask.labels[5, 4] == 1

    def test_rotation_by_pi(self):
        s0 = spec(radii=(5.0, 2.0), rotation=0.7)
        s1 = spec(radii=(5.0, 2.0), rotation=0.7 + math.pi)
        a = make_tumor_mask((32, 32), s0)
        b = make_tumor_mask((32, 32), s1)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_monotone_growth(self):
        areas = [make_tumor_mask((32, 32), spec(radii=(r, r))).labels.sum()
                 for r in (1.0, 2.0, 3.5, 5.0, 7.0)]
        assert all(a < b for a, b in zip(areas, areas[1:]))

    def test_out_of_bounds_center(self):
        with pytest.raises(PlacementError):
            make_tumor_mask((16, 16), spec(center=(20.0, 8.0)))


class TestInsertTumor:
    def test_sbr_near_one_is_background(self):
        bg = suv(np.full((32, 32), 2.0))
        img, _ = insert_tumor(bg, spec(sbr=1.0 + 1e-9), np.random.default_rng(1))
        assert np.abs(img.values - bg.values).max() < 1e-8

    def test_exact_region_mean_without_psf(self):
        bg = suv(np.full((32, 32), 1.5))
        s = spec(sbr=4.0, magnitude=0.0, psf=0.0)
        img, mask = insert_tumor(bg, s, np.random.default_rng(2))
        m = mask.labels.astype(bool)
        assert img.values[m].mean() == pytest.approx(4.0 * 1.5, rel=1e-12)

    def test_region_mean_with_psf(self):
        bg = suv(np.full((32, 32), 1.0))
        s = spec(radii=(7.0, 6.0), sbr=4.0, magnitude=0.0, psf=2.0)
        img, mask = insert_tumor(bg, s, np.random.default_rng(3))
        m = mask.labels.astype(bool)
        got = img.values[m].mean()
        assert abs(got - 4.0) / 4.0 < 0.10

    def test_paired_insertion_identical_increment(self):
        shape = (32, 32)
        s = spec(sbr=3.0, magnitude=0.4, psf=1.5)
        inc1, _ = lesion_increment(shape, s, 2.0, np.random.default_rng(7))
        inc2, _ = lesion_increment(shape, s, 2.0, np.random.default_rng(7))
        np.testing.assert_array_equal(inc1, inc2)
        # two different backgrounds with the same in-mask mean get the
        # bit-identical increment through insert_tumor as well
        flat = suv(np.full(shape, 2.0))
        rng_t = np.random.default_rng(8)
        textured_vals = 1.0 + rng_t.random(shape)
        mask = make_tumor_mask(shape, s).labels.astype(bool)
        textured_vals[mask] = 2.0  # identical values under the mask
        textured = suv(textured_vals)
        img_a, _ = insert_tumor(flat, s, np.random.default_rng(9))
        img_b, _ = insert_tumor(textured, s, np.random.default_rng(9))
        inc, _ = lesion_increment(shape, s, 2.0, np.random.default_rng(9))
        np.testing.assert_array_equal(img_a.values, flat.values + inc)
        np.testing.assert_array_equal(img_b.values, textured.values + inc)

    def test_nonnegative_increment(self):
        bg = suv(np.full((32, 32), 1.0))
        s = spec(sbr=2.0, magnitude=0.8, psf=0.0)
        img, _ = insert_tumor(bg, s, np.random.default_rng(10))
        assert (img.values - bg.values).min() >= -1e-12

    def test_nonpositive_background_rejected(self):
        bg = suv(np.zeros((32, 32)))
        with pytest.raises(InsertionError):
            insert_tumor(bg, spec(), np.random.default_rng(0))


class TestThresholdSegment:
    def test_binary_image(self):
        img = suv(np.array([[0.0, 1.0], [1.0, 0.0]]))
        roi = LabelGrid2D(np.ones((2, 2), dtype=int))
        seg = threshold_segment(img, roi, 0.5)
        np.testing.assert_array_equal(seg.labels, (img.values >= 0.5).astype(int))

    def test_monotone_shrink(self):
        rng = np.random.default_rng(11)
        img = suv(rng.random((16, 16)))
        roi = LabelGrid2D(np.ones((16, 16), dtype=int))
        sizes = [threshold_segment(img, roi, f).labels.sum()
                 for f in (0.2, 0.4, 0.6, 0.8)]
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))

    def test_empty_roi(self):
        with pytest.raises(InvalidParameterError):
            threshold_segment(suv(np.ones((4, 4))), LabelGrid2D(np.zeros((4, 4), dtype=int)))

    def test_end_to_end_high_contrast(self):
        bg = suv(np.full((32, 32), 1.0))
        s = spec(radii=(6.0, 5.0), sbr=8.0, magnitude=0.3, psf=2.0)
        img, true_mask = insert_tumor(bg, s, np.random.default_rng(12))
        roi = LabelGrid2D(np.ones((32, 32), dtype=int))
        seg = threshold_segment(img, roi, 0.41)
        assert dice(seg.labels, true_mask.labels) >= 0.8


class TestSpecSerialization:
    def test_json_round_trip(self):
        s = spec(sbr=3.3, magnitude=0.5, psf=1.7)
        back = TumorSpec.from_json(s.to_json())
        assert back == s

    def test_sampler_inside_roi(self):
        roi = np.zeros((32, 32), dtype=int)
        roi[10:20, 5:15] = 1
        rng = np.random.default_rng(13)
        for _ in range(20):
            s = sample_tumor_spec(LabelGrid2D(roi), rng)
            r, c = int(s.center[0]), int(s.center[1])
            assert roi[r, c] == 1
            assert s.sbr > 1 and s.radii[0] >= s.radii[1]
