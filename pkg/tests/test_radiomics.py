import math

import numpy as np
import pytest

from radiomics_oracle import all_features_oracle, glcm_features_oracle
from padkit.radiomics import (
    DIRECTIONS,
    FIRST_ORDER_NAMES,
    GLCM_NAMES,
    GlcmConfig,
    EmptyGlcmError,
    InsufficientDataError,
    all_features,
    first_order,
    glcm_averaged,
    glcm_features,
    glcm_matrix,
)


class TestFirstOrder:
    def test_feature_set(self):
        fv = first_order([1.0, 2.0, 3.0, 4.0])
        assert tuple(name for name, _ in fv) == FIRST_ORDER_NAMES
        assert len(fv) == 10

    def test_interpolated_percentiles(self):
        fv = dict(first_order([1.0, 2.0, 3.0, 4.0]))
        assert fv["median"] == pytest.approx(2.5)
        assert fv["range"] == 3.0
        assert fv["iqr"] == pytest.approx(1.5)

    def test_constant_region(self):
        fv = dict(first_order([2.0, 2.0, 2.0]))
        assert fv["entropy"] == 0.0
        assert fv["uniformity"] == 1.0
        assert fv["mad"] == 0.0
        assert math.isnan(fv["skewness"])
        assert math.isnan(fv["kurtosis"])

    def test_symmetric_skewness(self):
        for shift in (0.0, 5.0, -3.0):
            fv = dict(first_order(np.array([-1.0, 0.0, 1.0]) + shift))
            assert fv["skewness"] == pytest.approx(0.0, abs=1e-12)

    def test_too_few_values(self):
        with pytest.raises(InsufficientDataError):
            first_order([1.0])

    def test_mask_order_invariance(self):
        rng = np.random.default_rng(0)
        vals = rng.random(40)
        a = first_order(vals)
        b = first_order(vals[::-1].copy())
        for (n1, v1), (n2, v2) in zip(a, b):
            assert n1 == n2 and v1 == pytest.approx(v2, rel=1e-14)


class TestGlcmMatrix:
    def test_hand_enumeration(self):
        # [[0,0],[1,1]] at 2 levels, horizontal pairs: (0,0) and (1,1)
        img = np.array([[0.0, 0.0], [1.0, 1.0]])
        p = glcm_matrix(img, np.ones((2, 2)), (0, 1), GlcmConfig(bin_count=2))
        np.testing.assert_allclose(p, np.diag([0.5, 0.5]))

    def test_probability_matrix_contract(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            img = rng.random((5, 5))
            p = glcm_matrix(img, np.ones((5, 5)), (0, 1), GlcmConfig(bin_count=4))
            assert p.sum() == pytest.approx(1.0, abs=1e-12)
            np.testing.assert_allclose(p, p.T, atol=1e-15)
            assert (p >= 0).all()

    def test_constant_image(self):
        p = glcm_matrix(np.ones((3, 3)), np.ones((3, 3)), (0, 1), GlcmConfig(bin_count=4))
        assert p[0, 0] == 1.0
        assert p.sum() == 1.0

    def test_mask_restricts_pairs(self):
        img = np.array([[0.0, 1.0, 5.0]])
        mask = np.array([[1, 1, 0]])
        p = glcm_matrix(img, mask, (0, 1), GlcmConfig(bin_count=2))
        # only the (0,1) pair is inside the mask
        assert p[0, 1] == 0.5 and p[1, 0] == 0.5

    def test_no_pairs_raises(self):
        img = np.eye(3)
        mask = np.eye(3, dtype=int)  # diagonal mask has no horizontal pairs
        with pytest.raises(EmptyGlcmError):
            glcm_matrix(img, mask, (0, 1), GlcmConfig(bin_count=2))


class TestGlcmFeatures:
    def test_diagonal_matrix(self):
        fv = dict(glcm_features(np.diag([0.5, 0.5])))
        assert fv["contrast"] == 0.0
        assert fv["joint_energy"] == 0.5
        assert fv["inverse_difference"] == 1.0

    def test_constant_image_matrix(self):
        p = np.zeros((4, 4))
        p[0, 0] = 1.0
        fv = dict(glcm_features(p))
        assert fv["contrast"] == 0.0
        assert fv["joint_entropy"] == 0.0
        assert fv["joint_energy"] == 1.0

    def test_uniform_two_level(self):
        fv = dict(glcm_features(np.full((2, 2), 0.25)))
        assert fv["contrast"] == pytest.approx(0.5)
        assert fv["correlation"] == pytest.approx(0.0, abs=1e-15)

    def test_feature_set(self):
        fv = glcm_features(np.diag([0.5, 0.5]))
        assert tuple(name for name, _ in fv) == GLCM_NAMES
        assert len(fv) == 17

    def test_oracle_on_fixed_matrices(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            raw = rng.random((5, 5))
            p = raw + raw.T
            p /= p.sum()
            mine = dict(glcm_features(p))
            ref = glcm_features_oracle([list(row) for row in p])
            for name in GLCM_NAMES:
                assert mine[name] == pytest.approx(ref[name], abs=1e-9), name


class TestGlcmAveraged:
    def test_direction_average_checkerboard(self):
        img = np.indices((4, 4)).sum(axis=0) % 2 * 1.0
        per_dir = {d: dict(glcm_features(glcm_matrix(img, np.ones((4, 4)), d,
                                                     GlcmConfig(bin_count=2))))
                   for d in DIRECTIONS}
        # horizontal and vertical contrast both maximal and equal
        assert per_dir[(0, 1)]["contrast"] == per_dir[(-1, 0)]["contrast"] == 1.0
        avg = dict(glcm_averaged(img, np.ones((4, 4)), GlcmConfig(bin_count=2)))
        want = np.mean([per_dir[d]["contrast"] for d in DIRECTIONS])
        assert avg["contrast"] == pytest.approx(want)

    def test_isotropic_constant(self):
        img = np.ones((4, 4))
        avg = dict(glcm_averaged(img, np.ones((4, 4))))
        one = dict(glcm_features(glcm_matrix(img, np.ones((4, 4)), (0, 1))))
        for name in GLCM_NAMES:
            a, b = avg[name], one[name]
            assert (math.isnan(a) and math.isnan(b)) or a == pytest.approx(b)


class TestBruteForceParity:
    def test_all_27_features_match_oracle(self):
        rng = np.random.default_rng(3)
        checked = 0
        for _ in range(20):
            h = int(rng.integers(3, 7))
            w = int(rng.integers(3, 7))
            img = rng.random((h, w)) * rng.uniform(0.5, 20)
            mask = rng.random((h, w)) < 0.8
            if mask.sum() < 4:
                continue
            cfg = GlcmConfig(bin_count=int(rng.integers(2, 8)))
            try:
                mine = dict(all_features(img, mask, cfg))
            except EmptyGlcmError:
                continue
            ref = all_features_oracle(img, mask, cfg.bin_count)
            assert len(mine) == 27
            for name, value in mine.items():
                if math.isnan(value):
                    assert math.isnan(ref[name]), name
                else:
                    assert value == pytest.approx(ref[name], abs=1e-9), name
            checked += 1
        assert checked >= 10
