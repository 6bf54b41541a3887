"""Cloud containers, quaternions, covariances and pinhole projection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semsplat.scene import (
    IGNORE,
    Camera,
    FeatureImage,
    GaussianCloud,
    covariance_3d,
    look_at,
    make_cloud,
    project_point,
    quaternion_to_rotation,
)


def _cloud(n=4, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return make_cloud(rng.normal(size=(n, 3)), rng.uniform(size=(n, 3)), 0.5, 0.2, rng.normal(size=(n, d)))


class TestCloud:
    def test_shape_validation(self):
        cloud = _cloud()
        with pytest.raises(ValueError):
            GaussianCloud(**{**cloud.params(), "colors": np.zeros((3, 3))})

    def test_activations_round_trip(self):
        cloud = make_cloud(np.zeros((2, 3)), 0.5, [0.25, 0.9], [[0.1, 0.2, 0.3]], np.ones(3))
        np.testing.assert_allclose(cloud.opacities, [0.25, 0.9])
        np.testing.assert_allclose(cloud.scales, [[0.1, 0.2, 0.3]] * 2)

    def test_subset_and_concat(self):
        cloud = _cloud(5)
        both = cloud.subset([0, 2]).concat(cloud.subset([4]))
        assert len(both) == 3
        np.testing.assert_array_equal(both.positions, cloud.positions[[0, 2, 4]])

    def test_point_accessor(self):
        cloud = _cloud()
        g = cloud.point(1)
        np.testing.assert_allclose(g.rotation, np.eye(3))
        assert g.opacity == pytest.approx(0.5)


class TestRotation:
    def test_identity(self):
        np.testing.assert_allclose(quaternion_to_rotation([1, 0, 0, 0]), np.eye(3))

    def test_quarter_turn_about_z(self):
        q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
        np.testing.assert_allclose(quaternion_to_rotation(q) @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_unnormalized_input(self):
        np.testing.assert_allclose(quaternion_to_rotation([2, 0, 0, 0]), np.eye(3))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-2))
    def test_orthonormal(self, q):
        r = quaternion_to_rotation(q)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-10)
        assert np.linalg.det(r) == pytest.approx(1.0)

    def test_covariance_rotated_axes(self):
        # 90 degrees about z swaps the x and y variances.
        q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
        cov = covariance_3d(q, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 9.0]), atol=1e-12)


class TestCamera:
    def test_principal_point(self):
        cam = Camera(50, 50, 16, 12, 32, 24, np.eye(4))
        pixel, depth, visible = project_point(cam, [0, 0, 2])
        np.testing.assert_allclose(pixel, [16, 12])
        assert depth == 2 and visible

    def test_off_axis(self):
        cam = Camera(100, 80, 10, 20, 64, 64, np.eye(4))
        pixel, _, _ = project_point(cam, [0.5, -0.25, 2.0])
        np.testing.assert_allclose(pixel, [10 + 100 * 0.25, 20 - 80 * 0.125])

    def test_behind_camera(self):
        cam = Camera(50, 50, 16, 16, 32, 32, np.eye(4))
        pixel, _, visible = project_point(cam, [0, 0, -1])
        assert not visible and np.isnan(pixel).all()

    def test_look_at(self):
        pose = look_at([0, 0, -5], [0, 0, 0], up=(0, -1, 0))
        cam = Camera(50, 50, 16, 16, 32, 32, pose)
        pixel, depth, _ = project_point(cam, [0, 0, 0])
        np.testing.assert_allclose(pixel, [16, 16])
        assert depth == pytest.approx(5.0)
        np.testing.assert_allclose(cam.center, [0, 0, -5], atol=1e-12)

    def test_scaled(self):
        cam = Camera(100, 100, 32, 32, 64, 64, np.eye(4)).scaled(2)
        assert (cam.width, cam.height, cam.fx, cam.cx) == (32, 32, 50, 16)


class TestFeatureImage:
    def test_from_labels(self):
        table = np.eye(3)
        labels = np.array([[0, 2], [IGNORE, 1]], dtype=np.uint8)
        img = FeatureImage.from_labels(labels, table)
        np.testing.assert_array_equal(img.valid_mask, [[True, True], [False, True]])
        np.testing.assert_array_equal(img.data[0, 1], [0, 0, 1])
        np.testing.assert_array_equal(img.data[1, 0], 0)

    def test_mask_shape_checked(self):
        with pytest.raises(ValueError):
            FeatureImage(np.zeros((2, 2, 3)), np.zeros((3, 2)))
