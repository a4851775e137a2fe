#!/usr/bin/env python3
"""
Tests for feature fusion, mask composition and ground-truth masks
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from pyavsep import tensor as T
from pyavsep.fusion import (CoefficientGenerator, SpectrogramMask, compose_mask, fuse_features, gt_binary_mask,
                            gt_mask, gt_ratio_mask, mask_logits, separation_loss)
from pyavsep.tensor import LayerParams, ShapeError, Tensor


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestComposeMask:
    def test_zero_coefficients_give_half(self):
        bases = Tensor(np.random.default_rng(0).standard_normal((4, 6, 5)))
        mask = compose_mask(bases, Tensor(np.zeros(4)))
        assert_allclose(mask.values, 0.5)

    def test_single_basis(self):
        with T.precision(64):
            basis = np.random.default_rng(1).standard_normal((1, 6, 5))
            mask = compose_mask(Tensor(basis), Tensor(np.array([2.0])))
            assert_allclose(mask.values, _sigmoid(2.0 * basis[0]), atol=1e-12)

    def test_matches_loop(self):
        with T.precision(64):
            rng = np.random.default_rng(2)
            bases, coef = rng.standard_normal((3, 4, 5)), rng.standard_normal(3)
            expected = np.zeros((4, 5))
            for f in range(4):
                for n in range(5):
                    expected[f, n] = _sigmoid(sum(bases[j, f, n] * coef[j] for j in range(3)))
            assert_allclose(compose_mask(Tensor(bases), Tensor(coef)).values, expected, atol=1e-12)

    def test_coefficient_count(self):
        with pytest.raises(ShapeError):
            compose_mask(Tensor(np.zeros((3, 4, 5))), Tensor(np.zeros(2)))

    @pytest.mark.parametrize("j", [0, 2])
    def test_monotone_in_each_coefficient(self, j):
        with T.precision(64):
            rng = np.random.default_rng(3 + j)
            bases, coef = rng.standard_normal((3, 6, 7)), rng.standard_normal(3)
            raised = coef.copy()
            raised[j] += 0.5
            before = compose_mask(Tensor(bases), Tensor(coef)).values
            diff = compose_mask(Tensor(bases), Tensor(raised)).values - before
            assert np.all(diff[bases[j] > 0] >= 0)
            assert np.all(diff[bases[j] < 0] <= 0)
            assert np.any(diff > 0) and np.any(diff < 0)


class TestMaskLogits:
    def test_reads_each_object_mixture(self):
        with T.precision(64):
            rng = np.random.default_rng(3)
            bases, coef = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((3, 3))
            logits = mask_logits(Tensor(bases), Tensor(coef), [1, 0, 1]).values
            for i, b in enumerate([1, 0, 1]):
                assert_allclose(logits[i], np.tensordot(coef[i], bases[b], axes=1), atol=1e-12)

    def test_index_count(self):
        with pytest.raises(ShapeError):
            mask_logits(Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((2, 3))), [0])


class TestFusion:
    def test_concatenates_visual_first(self):
        fused = fuse_features(Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 4))))
        assert fused.shape == (2, 7)
        assert_allclose(fused.values[:, :3], 1.0)
        assert_allclose(fused.values[:, 3:], 0.0)

    def test_mismatched_rows(self):
        with pytest.raises(ShapeError):
            fuse_features(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))

    def test_generator_shapes(self):
        params = LayerParams(np.random.default_rng(0))
        generator = CoefficientGenerator(params, in_dim=7, hidden=5, num_bases=3)
        assert generator(Tensor(np.ones((4, 7))), training=False).shape == (4, 3)
        assert generator(Tensor(np.ones(7))).shape == (3,)
        with pytest.raises(ShapeError):
            generator(Tensor(np.ones((4, 6))))


class TestGroundTruth:
    def test_binary_masks_cover_every_bin(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((8, 8)), rng.random((8, 8))
        a[0, 0] = b[0, 0] = 0.5
        m1, m2 = gt_mask("binary", 0, [a, b]), gt_mask("binary", 1, [a, b])
        total = m1.values + m2.values
        assert np.all((total == 1) | (total == 2))
        assert total[0, 0] == 2

    def test_ratio_masks_sum_at_most_one(self):
        rng = np.random.default_rng(5)
        mags = [rng.random((8, 8)) for _ in range(3)]
        total = sum(gt_mask("ratio", i, mags).values for i in range(3))
        assert np.all(total <= 1.0)
        assert_allclose(total, 1.0, atol=1e-6)

    def test_silent_bins(self):
        zeros = np.zeros((2, 2))
        assert_allclose(gt_ratio_mask(zeros, [zeros, zeros]).values, 0.0)
        assert_allclose(gt_binary_mask(zeros, [zeros]).values, 1.0)

    def test_negative_magnitude(self):
        with pytest.raises(ValueError):
            gt_ratio_mask(-np.ones((2, 2)), [np.ones((2, 2))])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            gt_mask("soft", 0, [np.ones((2, 2))])

    @pytest.mark.parametrize("values,kind", [([[0.5]], "binary"), ([[1.5]], "ratio"), ([[0.0]], "soft")])
    def test_mask_validation(self, values, kind):
        with pytest.raises(ValueError):
            SpectrogramMask(np.array(values), kind)


class TestSeparationLoss:
    def test_binary_is_mean_bce(self):
        with T.precision(64):
            logits = np.array([[0.0, 2.0], [-1.0, 3.0]])
            gt = SpectrogramMask(np.array([[1.0, 0.0], [0.0, 1.0]]), "binary")
            p = _sigmoid(logits)
            expected = -np.mean(gt.values * np.log(p) + (1 - gt.values) * np.log(1 - p))
            assert separation_loss(Tensor(logits), gt, "binary").item() == pytest.approx(expected, abs=1e-12)

    def test_ratio_is_mean_l1(self):
        with T.precision(64):
            gt = SpectrogramMask(np.full((2, 2), 0.25), "ratio")
            assert separation_loss(Tensor(np.zeros((2, 2))), gt, "ratio").item() == pytest.approx(0.25)

    def test_kind_mismatch(self):
        gt = SpectrogramMask(np.zeros((2, 2)), "ratio")
        with pytest.raises(ValueError):
            separation_loss(Tensor(np.zeros((2, 2))), gt, "binary")

    def test_shape_mismatch(self):
        gt = SpectrogramMask(np.zeros((2, 2)), "ratio")
        with pytest.raises(ShapeError):
            separation_loss(Tensor(np.zeros((2, 3))), gt, "ratio")


if __name__ == "__main__":
    pytest.main([__file__])
