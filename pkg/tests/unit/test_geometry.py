"""Unit tests for cameras, rays, projection and depth sampling."""

import numpy as np
import pytest

from src.errors import ContractError, DatasetError, PointBehindCamera
from src.geometry import (
    CameraModel,
    Ray,
    clip_ray,
    intersect_bbox,
    load_camera,
    look_at_camera,
    project_point,
    ray_for_pixel,
    sample_ray_depths,
    save_camera,
    stratified_depths,
)
from src.volume import BoundingBox

pytestmark = pytest.mark.unit


class TestCameraModel:
    """Tests for camera validation and serialization."""

    def test_rejects_non_orthonormal_rotation(self):
        """A scaled rotation is not a valid pose."""
        with pytest.raises(ContractError):
            CameraModel(1.0, 1.0, 0.0, 0.0, 4, 4, rotation=2.0 * np.eye(3))

    def test_rejects_reflection(self):
        """Determinant -1 is rejected even though the matrix is orthonormal."""
        with pytest.raises(ContractError):
            CameraModel(1.0, 1.0, 0.0, 0.0, 4, 4, rotation=np.diag([1.0, 1.0, -1.0]))

    def test_rejects_nonpositive_focal(self):
        """Focal lengths must be positive."""
        with pytest.raises(ContractError):
            CameraModel(0.0, 1.0, 0.0, 0.0, 4, 4)

    def test_center_is_minus_rt_t(self):
        """Translation (0, 0, -5) with identity rotation puts the centre at (0, 0, 5)."""
        camera = CameraModel(1.0, 1.0, 0.0, 0.0, 4, 4, translation=np.array([0.0, 0.0, -5.0]))
        np.testing.assert_allclose(camera.center, [0.0, 0.0, 5.0])

    def test_save_and_load(self, tmp_path):
        """A saved camera loads back with the same parameters."""
        camera = look_at_camera(
            np.array([2.0, 0.0, 1.0]), np.zeros(3), np.array([0.0, 0.0, 1.0]), 20.0, 21.0, 8.0, 7.5, 16, 15
        )
        save_camera(camera, tmp_path / "cam.json")
        loaded = load_camera(tmp_path / "cam.json")
        assert loaded.to_dict() == camera.to_dict()

    def test_load_malformed_camera(self, tmp_path):
        """A camera file with a missing field raises DatasetError."""
        (tmp_path / "cam.json").write_text('{"fx": 1.0}')
        with pytest.raises(DatasetError):
            load_camera(tmp_path / "cam.json")


class TestRays:
    """Tests for pixel rays."""

    def test_principal_point_maps_to_optical_axis(self, identity_camera):
        """The ray through (0, 0) points straight down +z."""
        ray = ray_for_pixel(identity_camera, 0.0, 0.0)
        np.testing.assert_allclose(ray.direction, [0.0, 0.0, 1.0])

    def test_off_axis_direction(self, identity_camera):
        """The ray through (1, 0) is normalized (1, 0, 1)."""
        ray = ray_for_pixel(identity_camera, 1.0, 0.0)
        np.testing.assert_allclose(ray.direction, [0.7071068, 0.0, 0.7071068], atol=1e-7)

    def test_origin_is_camera_center(self):
        """Rays start at the camera centre."""
        camera = CameraModel(1.0, 1.0, 0.0, 0.0, 4, 4, translation=np.array([0.0, 0.0, -5.0]))
        ray = ray_for_pixel(camera, 0.5, 0.5)
        np.testing.assert_allclose(ray.origin, [0.0, 0.0, 5.0])

    def test_outside_frame_raises(self, identity_camera):
        """u == width is outside the frame."""
        with pytest.raises(ContractError):
            ray_for_pixel(identity_camera, 4.0, 0.0)

    def test_ray_requires_unit_direction(self):
        """Non-unit directions are rejected."""
        with pytest.raises(ContractError):
            Ray(np.zeros(3), np.array([0.0, 0.0, 2.0]))

    def test_project_round_trip(self, rng):
        """Points along a pixel ray project back onto that pixel."""
        camera = look_at_camera(
            np.array([1.5, -1.0, 1.2]),
            np.array([0.5, 0.5, 0.2]),
            np.array([0.0, 0.0, 1.0]),
            30.0,
            30.0,
            16.0,
            16.0,
            32,
            32,
        )
        for _ in range(20):
            u, v = rng.uniform(0.0, 32.0, size=2)
            ray = ray_for_pixel(camera, u, v)
            for s in (0.1, 1.0, 7.5):
                pu, pv, _ = project_point(camera, ray.at(s))
                assert abs(pu - u) < 1e-6
                assert abs(pv - v) < 1e-6


class TestProjection:
    """Tests for pinhole projection."""

    def test_on_axis_point(self):
        """(0, 0, 2) lands on the principal point at depth 2."""
        camera = CameraModel(10.0, 10.0, 3.0, 4.0, 8, 8)
        assert project_point(camera, np.array([0.0, 0.0, 2.0])) == pytest.approx((3.0, 4.0, 2.0))

    def test_off_axis_point(self, identity_camera):
        """u = fx * x / z + cx."""
        u, _, _ = project_point(identity_camera, np.array([2.0, 0.0, 2.0]))
        assert u == pytest.approx(1.0)

    def test_behind_camera(self, identity_camera):
        """Negative depth raises PointBehindCamera."""
        with pytest.raises(PointBehindCamera):
            project_point(identity_camera, np.array([0.0, 0.0, -1.0]))


class TestDepthSampling:
    """Tests for stratified depths and box clipping."""

    def test_one_sample_per_bin(self, rng):
        """M=4 over [0, 4] puts sample i in [i, i+1)."""
        depths = stratified_depths(np.array(0.0), np.array(4.0), 4, rng)
        for i, t in enumerate(depths):
            assert i <= t < i + 1

    def test_depths_ascending(self, rng):
        """Depths increase along every ray."""
        depths = stratified_depths(np.zeros(50), rng.uniform(0.5, 3.0, 50), 16, rng)
        assert np.all(np.diff(depths, axis=-1) > 0)

    def test_single_sample(self, rng):
        """M=1 over [1, 2] draws one depth in [1, 2)."""
        drawn = sample_ray_depths(Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 2.0), 1, rng)
        assert drawn.depths.shape == (1,)
        assert 1.0 <= drawn.depths[0] < 2.0

    def test_same_seed_same_depths(self):
        """Seed 42 gives identical draws twice."""
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.5, 3.0)
        a = sample_ray_depths(ray, 8, np.random.default_rng(42)).depths
        b = sample_ray_depths(ray, 8, np.random.default_rng(42)).depths
        np.testing.assert_array_equal(a, b)

    def test_zero_samples_rejected(self, rng):
        """At least one sample is required."""
        with pytest.raises(ContractError):
            stratified_depths(np.array(0.0), np.array(1.0), 0, rng)

    def test_unbounded_ray_rejected(self, rng):
        """A ray must be clipped before sampling."""
        with pytest.raises(ContractError):
            sample_ray_depths(Ray(np.zeros(3), np.array([0.0, 0.0, 1.0])), 4, rng)

    def test_clip_to_box(self):
        """A ray along +z through the unit box enters at its near face."""
        ray = Ray(np.array([0.5, 0.5, -1.0]), np.array([0.0, 0.0, 1.0]))
        clipped = clip_ray(ray, BoundingBox.unit())
        assert clipped.t_near == pytest.approx(1.0)
        assert clipped.t_far == pytest.approx(2.0)

    def test_clip_miss(self):
        """A ray passing beside the box is dropped."""
        ray = Ray(np.array([2.0, 2.0, -1.0]), np.array([0.0, 0.0, 1.0]))
        assert clip_ray(ray, BoundingBox.unit()) is None

    def test_intersect_inside_box_starts_at_origin(self):
        """Rays that start inside the box have t_near = 0."""
        t_near, t_far, hit = intersect_bbox(
            np.array([[0.5, 0.5, 0.5]]), np.array([[1.0, 0.0, 0.0]]), BoundingBox.unit()
        )
        assert hit[0]
        assert t_near[0] == 0.0
        assert t_far[0] == pytest.approx(0.5)
