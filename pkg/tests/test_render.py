"""Forward compositing values and analytic gradients of the rasterizer."""

import numpy as np
import pytest

from helpers import gradient_errors, random_render_problem
from semsplat.render import EmptySceneError, render, render_backward
from semsplat.scene import Camera, make_cloud


def _camera(size=16):
    # Principal point on a pixel center so a centered Gaussian peaks there.
    return Camera(16, 16, size / 2 + 0.5, size / 2 + 0.5, size, size, np.eye(4))


class TestForward:
    def test_single_gaussian_peak(self):
        cloud = make_cloud([[0, 0, 3]], [0.2, 0.4, 0.6], 0.7, 0.3, [1.0, 0.0])
        out = render(cloud, _camera(), background=(1, 1, 1))
        assert out.alpha[8, 8] == pytest.approx(0.7)
        np.testing.assert_allclose(out.rgb[8, 8], 0.7 * np.array([0.2, 0.4, 0.6]) + 0.3)
        np.testing.assert_allclose(out.features.data[8, 8], [0.7, 0.0])

    def test_front_to_back_order(self):
        # Input order must not matter; the nearer red Gaussian occludes the green one.
        cloud = make_cloud([[0, 0, 5], [0, 0, 2]], [[0, 1, 0], [1, 0, 0]], 0.9, 0.3, [[0.0], [1.0]])
        out = render(cloud, _camera(), min_weight=0)
        np.testing.assert_allclose(out.rgb[8, 8], [0.9, 0.1 * 0.9, 0])
        assert out.dominant[8, 8] == 1

    def test_gate_scales_opacity(self):
        cloud = make_cloud([[0, 0, 3]], 1.0, 0.8, 0.3, [1.0])
        out = render(cloud, _camera(), gates=np.array([0.5]))
        assert out.alpha[8, 8] == pytest.approx(0.4)

    def test_zero_gate_is_invisible(self):
        cloud = make_cloud([[0, 0, 3]], 1.0, 0.8, 0.3, [1.0])
        out = render(cloud, _camera(), gates=np.zeros(1), background=(0.1, 0.2, 0.3))
        np.testing.assert_allclose(out.rgb, np.broadcast_to([0.1, 0.2, 0.3], out.rgb.shape))
        assert not out.features.valid_mask.any()

    def test_behind_camera_culled(self):
        cloud = make_cloud([[0, 0, -3], [0, 0, 3]], 1.0, 0.8, 0.3, [1.0])
        out = render(cloud, _camera())
        np.testing.assert_array_equal(out.visible, [False, True])
        assert out.per_gaussian_weight[0] == 0

    def test_alpha_bounded(self):
        cloud, cam, gates, _, _ = random_render_problem(3)
        out = render(cloud, cam, gates)
        assert out.alpha.min() >= 0 and out.alpha.max() <= 1

    def test_empty_cloud_rejected(self):
        cloud = make_cloud(np.zeros((0, 3)), 1.0, 0.5, 0.1, np.zeros((0, 2)))
        with pytest.raises(EmptySceneError):
            render(cloud, _camera())


class TestBackward:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_differences(self, seed):
        worst = gradient_errors(seed)
        assert max(worst.values()) < 1e-3, worst

    def test_upstream_shape_checked(self):
        cloud, cam, gates, grad_rgb, _ = random_render_problem(0)
        with pytest.raises(ValueError):
            render_backward(cloud, cam, gates, grad_rgb, np.zeros((16, 16, 1)))

    def test_zero_upstream_gives_zero(self):
        cloud, cam, gates, grad_rgb, grad_feat = random_render_problem(1)
        g = render_backward(cloud, cam, gates, 0 * grad_rgb, 0 * grad_feat)
        for arr in g.as_dict().values():
            assert not arr.any()
