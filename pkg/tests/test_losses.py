"""Semantic cosine loss, SSIM, the photometric loss and the weighted total."""

import numpy as np
import pytest

from helpers import ssim_oracle
from semsplat.losses import LossWeights, rgb_loss, semantic_loss, ssim, total_loss
from semsplat.scene import FeatureImage


def _img(data, mask=None):
    data = np.asarray(data, dtype=np.float64)
    return FeatureImage(data, np.ones(data.shape[:2], bool) if mask is None else mask)


class TestSemantic:
    def test_endpoints(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=(4, 5, 3))
        assert semantic_loss(_img(2 * t), _img(t))[0] == pytest.approx(0, abs=1e-12)
        assert semantic_loss(_img(-t), _img(t))[0] == pytest.approx(2, abs=1e-12)

    def test_bounds_random(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            loss, _ = semantic_loss(_img(rng.normal(size=(3, 3, 4))), _img(rng.normal(size=(3, 3, 4))))
            assert 0 <= loss <= 2

    def test_masked_pixels_ignored(self):
        t = np.zeros((1, 2, 2))
        t[0, 0] = [1, 0]
        t[0, 1] = [0, 1]
        mask = np.array([[True, False]])
        p = np.array([[[1.0, 0.0], [-1.0, 0.0]]])
        loss, grad = semantic_loss(_img(p), _img(t, mask))
        assert loss == pytest.approx(0)
        assert not grad[0, 1].any()

    def test_empty_mask(self):
        loss, grad = semantic_loss(_img(np.ones((2, 2, 2))), FeatureImage.empty(2, 2, 2))
        assert loss == 0 and not grad.any()

    def test_gradient(self):
        rng = np.random.default_rng(2)
        p, t = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
        mask = rng.uniform(size=(3, 4)) > 0.3
        _, grad = semantic_loss(_img(p), _img(t, mask))
        h = 1e-6
        for idx in [(0, 0, 0), (1, 2, 3), (2, 3, 4)]:
            q = p.copy()
            q[idx] += h
            up = semantic_loss(_img(q), _img(t, mask))[0]
            q[idx] -= 2 * h
            down = semantic_loss(_img(q), _img(t, mask))[0]
            assert grad[idx] == pytest.approx((up - down) / (2 * h), abs=1e-8)


class TestSSIM:
    def test_identity(self):
        x = np.random.default_rng(0).uniform(size=(16, 16, 3))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_windowed_definition(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(size=(32, 32, 3)), rng.uniform(size=(32, 32, 3))
        assert abs(ssim(x, y) - ssim_oracle(x, y)) < 1e-6

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x, y = rng.uniform(size=(13, 12, 2)), rng.uniform(size=(13, 12, 2))
        _, grad = ssim(x, y, return_grad=True)
        h = 1e-6
        for idx in [(0, 0, 0), (6, 5, 1), (12, 11, 0)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            assert grad[idx] == pytest.approx((ssim(xp, y) - ssim(xm, y)) / (2 * h), abs=1e-8)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestRGB:
    def test_matches_definition(self):
        rng = np.random.default_rng(6)
        x, y = rng.uniform(size=(32, 32, 3)), rng.uniform(size=(32, 32, 3))
        expected = 0.8 * np.abs(x - y).mean() + 0.2 * (1 - ssim_oracle(x, y))
        assert abs(rgb_loss(x, y)[0] - expected) < 1e-6

    def test_identical_images(self):
        x = np.random.default_rng(7).uniform(size=(12, 12, 3))
        assert rgb_loss(x, x)[0] == pytest.approx(0, abs=1e-12)

    def test_pure_l1(self):
        x = np.zeros((2, 2, 3))
        loss, grad = rgb_loss(x, np.full_like(x, 0.5), lambda_ssim=0.0)
        assert loss == pytest.approx(0.5)
        np.testing.assert_allclose(grad, -1 / 12)


class TestTotal:
    def test_worked_value(self):
        assert total_loss(0.5, 0.2, 0.9, LossWeights(1.0, 1.0, 0.01)) == pytest.approx(0.709)

    def test_weighted_sum_exact(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            s, r, l0 = rng.uniform(size=3)
            w = LossWeights(*rng.uniform(size=3))
            assert total_loss(s, r, l0, w) == w.lambda_semantic * s + w.lambda_rgb * r + w.lambda_l0 * l0

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError, match="rgb"):
            total_loss(0.1, float("nan"), 0.0, LossWeights())

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_rgb=-1).validate()
