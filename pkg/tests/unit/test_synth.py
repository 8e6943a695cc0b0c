"""Unit tests for synthetic scenes, oracle renders and dataset I/O."""

import numpy as np
import pytest
from pydantic import ValidationError

from src.errors import ContractError, DatasetError
from src.geometry import look_at_camera, pixel_center, rays_for_pixels
from src.synth.dataset import assign_splits, load_dataset, load_scene
from src.renderer import alphas_from_sdf, occlusion_weights
from src.synth.oracle import (
    gt_density_map_2d,
    gt_density_volume,
    oracle_render_rays,
    oracle_render_view,
    sample_weights,
)
from src.synth.scene import (
    SceneSpec,
    SynthConfig,
    analytic_color,
    analytic_density,
    analytic_sdf,
    random_scene,
    ring_cameras,
    sphere_entity,
)
from src.volume import BoundingBox

pytestmark = pytest.mark.unit

UP = np.array([0.0, 1.0, 0.0])


def one_sphere_scene(center=(0.5, 0.5, 0.5), radius=0.25):
    return SceneSpec(bbox=BoundingBox.unit(), entities=[sphere_entity(np.array(center), radius)])


def ray_sphere(origins, dirs, center, radius):
    """Nearest positive hit distance of unit-direction rays, inf on a miss."""
    oc = origins - center
    b = np.sum(oc * dirs, axis=1)
    disc = b**2 - (np.sum(oc * oc, axis=1) - radius**2)
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    return np.where(disc > 0, t, np.inf)


class TestAnalyticFields:
    """Tests for analytic SDF, colour and density."""

    def test_unit_sphere_sdf(self):
        """Unit sphere at the origin: 1 at (2, 0, 0), -1 at the centre."""
        scene = SceneSpec(bbox=BoundingBox.unit(), entities=[sphere_entity(np.zeros(3), 1.0)])
        np.testing.assert_allclose(analytic_sdf(scene, np.array([[2.0, 0, 0], [0, 0, 0]])), [1.0, -1.0])

    def test_union_is_minimum(self):
        """Two spheres combine by pointwise minimum."""
        scene = SceneSpec(
            bbox=BoundingBox.unit(),
            entities=[sphere_entity(np.zeros(3), 1.0), sphere_entity(np.array([5.0, 0, 0]), 1.0)],
        )
        np.testing.assert_allclose(analytic_sdf(scene, np.array([[3.5, 0.0, 0.0]])), [0.5])

    def test_empty_scene_is_infinitely_far(self):
        """No surfaces at all gives +inf."""
        scene = SceneSpec(bbox=BoundingBox.unit())
        assert np.isinf(analytic_sdf(scene, np.zeros((1, 3))))[0]

    def test_color_of_nearest_surface(self):
        """Colour comes from the closest entity."""
        scene = SceneSpec(
            bbox=BoundingBox.unit(),
            entities=[
                sphere_entity(np.zeros(3), 0.5, albedo=np.array([1.0, 0, 0])),
                sphere_entity(np.array([2.0, 0, 0]), 0.5, albedo=np.array([0, 0, 1.0])),
            ],
        )
        np.testing.assert_allclose(analytic_color(scene, np.array([[1.8, 0, 0]]))[0], [0, 0, 1.0])

    def test_density_peak(self):
        """Unit-mass Gaussian with sigma 0.1 peaks at (2 pi 0.01)^-1.5."""
        scene = SceneSpec(bbox=BoundingBox.unit(), entities=[sphere_entity(np.zeros(3), 0.1, sigma=0.1)])
        assert analytic_density(scene, np.zeros((1, 3)))[0] == pytest.approx(63.494, rel=1e-4)
        assert analytic_density(scene, np.array([[2.0, 0, 0]]))[0] < 1e-12

    def test_density_volume_counts_people(self):
        """A head well inside the box integrates to about one person."""
        scene = SceneSpec(bbox=BoundingBox.unit(), entities=[sphere_entity(np.full(3, 0.5), 0.05, sigma=0.08)])
        vol = gt_density_volume(scene, (41, 41, 41))
        assert vol.total() == pytest.approx(1.0, abs=0.01)

    def test_density_volume_needs_two_nodes(self):
        """Grids need at least two nodes per axis."""
        with pytest.raises(ContractError):
            gt_density_volume(one_sphere_scene(), (1, 4, 4))


class TestOracle:
    """Tests for oracle renders and ground-truth density maps."""

    def test_miss_is_empty(self, rng):
        """A ray that misses the box accumulates nothing."""
        _, depth, acc = oracle_render_rays(
            one_sphere_scene(), np.array([[3.0, 3.0, -1.0]]), np.array([[0.0, 0.0, 1.0]]), 64, 200.0, rng
        )
        assert acc[0] < 0.01
        assert depth[0] == 0.0

    def test_sphere_hit_depth(self, rng):
        """Depth along the axis lands on the front of the sphere."""
        color, depth, acc = oracle_render_rays(
            one_sphere_scene(), np.array([[0.5, 0.5, -1.0]]), np.array([[0.0, 0.0, 1.0]]), 512, 200.0, rng
        )
        assert depth[0] == pytest.approx(1.25, abs=0.01)
        assert acc[0] > 0.95
        np.testing.assert_allclose(color[0], np.full(3, 0.8), atol=0.05)

    def test_view_shapes(self, rng):
        """Oracle views match the camera resolution."""
        camera = look_at_camera(np.array([0.5, 0.5, 3.0]), np.full(3, 0.5), UP, 8.0, 8.0, 4.0, 4.0, 8, 8)
        view = oracle_render_view(one_sphere_scene(), camera, rng, samples=32)
        assert view.image.shape == (8, 8, 3)
        assert view.depth.shape == (8, 8)
        assert np.all((view.image >= 0) & (view.image <= 1))

    def test_view_needs_two_samples(self, rng):
        """One sample per ray is rejected."""
        camera = look_at_camera(np.array([0.5, 0.5, 3.0]), np.full(3, 0.5), UP, 8.0, 8.0, 4.0, 4.0, 8, 8)
        with pytest.raises(ContractError):
            oracle_render_view(one_sphere_scene(), camera, rng, samples=1)

    def test_back_entity_is_hidden(self, rng):
        """Where one sphere sits fully behind another, depth shows only the front one."""
        front = sphere_entity(np.array([0.5, 0.5, 0.7]), 0.15)
        back = sphere_entity(np.array([0.5, 0.5, 0.3]), 0.1)
        scene = SceneSpec(bbox=BoundingBox.unit(), entities=[front, back])
        camera = look_at_camera(np.array([0.5, 0.5, 3.0]), np.full(3, 0.5), UP, 40.0, 40.0, 8.0, 8.0, 16, 16)
        view = oracle_render_view(scene, camera, rng, samples=512)

        jj, ii = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        origins, dirs = rays_for_pixels(camera, *pixel_center(ii.ravel(), jj.ravel()))
        t_front = ray_sphere(origins, dirs, front.center, front.radius)
        covered = np.isfinite(ray_sphere(origins, dirs, back.center, back.radius))
        assert covered.sum() >= 4
        assert np.all(np.isfinite(t_front[covered]))
        np.testing.assert_allclose(view.depth.ravel()[covered], t_front[covered], atol=0.01)

    def test_weights_agree_with_renderer(self, rng):
        """Oracle compositing and the learned renderer agree on the same SDF samples."""
        sdf = rng.normal(0.0, 0.1, (50, 16))
        alphas, _ = alphas_from_sdf(sdf, 20.0)
        np.testing.assert_allclose(sample_weights(sdf, 20.0), occlusion_weights(alphas), rtol=1e-10, atol=1e-13)

    def test_visible_head_sums_to_one(self):
        """One head in frame contributes unit mass to the map."""
        camera = look_at_camera(np.array([0.5, 0.5, 3.0]), np.full(3, 0.5), UP, 8.0, 8.0, 8.0, 8.0, 16, 16)
        dmap = gt_density_map_2d(one_sphere_scene(), camera)
        assert dmap.shape == (4, 4)
        assert dmap.sum() == pytest.approx(1.0)

    def test_head_behind_camera_is_absent(self):
        """Heads behind the camera contribute nothing."""
        camera = look_at_camera(
            np.array([0.5, 0.5, 3.0]), np.array([0.5, 0.5, 5.0]), UP, 8.0, 8.0, 8.0, 8.0, 16, 16
        )
        np.testing.assert_array_equal(gt_density_map_2d(one_sphere_scene(), camera), 0.0)


class TestSceneGeneration:
    """Tests for configs, random scenes and splits."""

    def test_image_size_must_divide_by_four(self):
        """The encoder stride constrains image sizes."""
        with pytest.raises(ValidationError):
            SynthConfig(image_size=30)

    def test_needs_two_views(self):
        """Self-supervision needs at least two views."""
        with pytest.raises(ValidationError):
            SynthConfig(views=1)

    def test_unknown_keys_rejected(self):
        """Typos in config keys fail loudly."""
        with pytest.raises(ValidationError):
            SynthConfig(num_scene=3)

    def test_ring_cameras_see_target(self):
        """Every ring camera sees the look-at point in front of it."""
        config = SynthConfig(views=5)
        for camera in ring_cameras(config):
            z = camera.rotation @ np.array(config.look_at) + camera.translation
            assert z[2] > 0

    def test_random_scene_counts(self, rng):
        """Entity counts respect the configured range."""
        config = SynthConfig(entities_min=2, entities_max=4)
        for _ in range(10):
            assert 2 <= random_scene(config, rng).count <= 4

    def test_scene_dict_round_trip(self, rng):
        """Scenes survive to_dict/from_dict."""
        scene = random_scene(SynthConfig(), rng)
        again = SceneSpec.from_dict(scene.to_dict())
        p = rng.uniform(0, 1, (20, 3))
        np.testing.assert_allclose(analytic_sdf(again, p), analytic_sdf(scene, p))

    def test_assign_splits_deterministic(self):
        """The same seed gives the same split."""
        assert assign_splits(10, 0.3, 5) == assign_splits(10, 0.3, 5)
        assert assign_splits(10, 0.3, 5).count("val") == 3

    def test_no_val_fraction(self):
        """Fraction 0 keeps every scene in train."""
        assert set(assign_splits(4, 0.0, 1)) == {"train"}


class TestDatasetIO:
    """Tests for loading generated datasets."""

    def test_loaded_shapes(self, tiny_dataset):
        """Records carry consistent per-view arrays."""
        for record in tiny_dataset.scenes:
            assert record.images.shape == (2, 16, 16, 3)
            assert record.density_maps.shape == (2, 4, 4)
            assert record.depth_prior.shape == (2, 16, 16)
            assert record.density_volume.values.shape == (8, 8, 8, 1)
            assert 2 <= record.count <= 3

    def test_split_sizes(self, tiny_dataset):
        """Three scenes at val fraction 0.34 leave one in val."""
        assert len(tiny_dataset.split("val")) == 1
        assert len(tiny_dataset.split("train")) == 2
        assert len(tiny_dataset.split("all")) == 3

    def test_load_scene_matches_dataset(self, tiny_dataset, tiny_dataset_dir):
        """Loading a scene on its own gives the same data."""
        record = tiny_dataset.scenes[0]
        again = load_scene(tiny_dataset_dir / record.scene_id)
        np.testing.assert_array_equal(again.images, record.images)

    def test_missing_dataset(self, tmp_path):
        """A directory without a manifest is a dataset error."""
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)
