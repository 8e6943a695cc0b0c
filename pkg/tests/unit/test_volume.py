"""Unit tests for the feature volume: addressing, trilinear sampling, integration."""

import numpy as np
import pytest

from src.errors import ContractError, DatasetError
from src.grad.tape import Tensor, gradients
from src.volume import (
    BoundingBox,
    DensityVolume,
    FeatureVolume,
    bev_density_map,
    integrate_trapezoid,
    load_volume,
    sample_trilinear,
    sample_trilinear_backward,
    save_volume,
    scatter_to_grid,
    trilinear_features,
    world_to_grid,
)

pytestmark = pytest.mark.unit


@pytest.fixture
def random_volume(rng):
    return FeatureVolume(BoundingBox.unit(), rng.standard_normal((3, 4, 5, 2)))


class TestBoundingBox:
    """Tests for box validation."""

    def test_min_must_be_below_max(self):
        """Degenerate boxes are rejected."""
        with pytest.raises(ContractError):
            BoundingBox(np.zeros(3), np.array([1.0, 0.0, 1.0]))

    def test_dict_round_trip(self):
        """to_dict/from_dict preserve the corners."""
        box = BoundingBox(np.array([-1.0, 0.0, 2.0]), np.array([1.0, 3.0, 4.0]))
        again = BoundingBox.from_dict(box.to_dict())
        np.testing.assert_array_equal(again.min, box.min)
        np.testing.assert_array_equal(again.max, box.max)


class TestWorldToGrid:
    """Tests for the world -> grid affine map."""

    @pytest.mark.parametrize(
        "point, expected",
        [((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)), ((1.0, 1.0, 1.0), (1.0, 1.0, 1.0)), ((0.5, 0.0, 0.0), (0.5, 0.0, 0.0))],
    )
    def test_unit_box_two_nodes(self, point, expected):
        """Corners and midpoints of a 2^3 grid."""
        grid, outside = world_to_grid(BoundingBox.unit(), (2, 2, 2), np.array([point]))
        np.testing.assert_allclose(grid[0], expected)
        assert not outside[0]

    def test_outside_is_flagged_unclamped(self):
        """Out-of-box points keep their coordinates and carry the flag."""
        grid, outside = world_to_grid(BoundingBox.unit(), (2, 2, 2), np.array([[1.5, 0.5, -0.5]]))
        np.testing.assert_allclose(grid[0], [1.5, 0.5, -0.5])
        assert outside[0]


class TestTrilinear:
    """Tests for trilinear sampling and its adjoint."""

    def test_exact_at_node(self, random_volume):
        """A query on a node returns that node's features."""
        p = np.array([0.5, 1.0 / 3.0, 0.75])  # node (1, 1, 3)
        np.testing.assert_allclose(sample_trilinear(random_volume, p), random_volume.values[1, 1, 3])

    def test_cell_center_is_corner_mean(self, random_volume):
        """The centre of a cell averages its 8 corners."""
        cell = random_volume.cell
        p = (np.array([0, 1, 2]) + 0.5) * cell
        expected = random_volume.values[0:2, 1:3, 2:4].reshape(-1, 2).mean(axis=0)
        np.testing.assert_allclose(sample_trilinear(random_volume, p), expected)

    def test_linear_blend_along_x(self):
        """Values 0 and 2 along x, queried a quarter of the way, give 0.5."""
        values = np.zeros((2, 2, 2, 1))
        values[1] = 2.0
        vol = FeatureVolume(BoundingBox.unit(), values)
        assert sample_trilinear(vol, np.array([0.25, 0.3, 0.7]))[0] == pytest.approx(0.5)

    def test_clamp_to_edge(self, random_volume):
        """Queries outside the box read the nearest face."""
        inside = sample_trilinear(random_volume, np.array([1.0, 0.2, 0.4]))
        outside = sample_trilinear(random_volume, np.array([3.0, 0.2, 0.4]))
        np.testing.assert_allclose(outside, inside)

    def test_batched_matches_single(self, random_volume, rng):
        """Batch queries agree with one-at-a-time queries."""
        points = rng.uniform(0.0, 1.0, (10, 3))
        batch = sample_trilinear(random_volume, points)
        for i, p in enumerate(points):
            np.testing.assert_allclose(batch[i], sample_trilinear(random_volume, p))

    def test_backward_at_node(self, random_volume):
        """At a node, the whole upstream gradient lands on that node."""
        nodes, contrib = sample_trilinear_backward(random_volume, np.array([0.5, 1.0 / 3.0, 0.75]), np.ones(2))
        grid = scatter_to_grid(random_volume, nodes, contrib)
        expected = np.zeros_like(grid)
        expected[1, 1, 3] = 1.0
        np.testing.assert_allclose(grid, expected, atol=1e-12)

    def test_backward_at_cell_center(self):
        """At a cell centre each of the 8 nodes receives 0.125."""
        vol = FeatureVolume(BoundingBox.unit(), np.zeros((2, 2, 2, 1)))
        _, contrib = sample_trilinear_backward(vol, np.full(3, 0.5), np.ones(1))
        np.testing.assert_allclose(contrib[:, 0], np.full(8, 0.125))

    def test_adjoint_matches_finite_differences(self, random_volume, rng):
        """Tape gradient of a weighted sample equals central differences."""
        points = rng.uniform(0.0, 1.0, (6, 3))
        upstream = rng.standard_normal((6, 2))
        values = random_volume.values

        def f(v):
            return float(np.sum(trilinear_features(v, random_volume.bbox, points) * upstream))

        leaf = Tensor(values, requires_grad=True)
        out = (trilinear_features(leaf, random_volume.bbox, points) * upstream).sum()
        (analytic,) = gradients(out, [leaf])

        h = 1e-4
        numeric = np.zeros_like(values)
        for idx in np.ndindex(values.shape):
            plus, minus = values.copy(), values.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric[idx] = (f(plus) - f(minus)) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)

    def test_continuous_across_cell_faces(self, random_volume, rng):
        """Queries just either side of an interior face agree."""
        eps = 1e-9
        for axis, faces in enumerate(([0.5], [1.0 / 3.0, 2.0 / 3.0], [0.25, 0.5, 0.75])):
            for face in faces:
                p = rng.uniform(0.0, 1.0, (20, 3))
                below, above = p.copy(), p.copy()
                below[:, axis] = face - eps
                above[:, axis] = face + eps
                np.testing.assert_allclose(
                    sample_trilinear(random_volume, below), sample_trilinear(random_volume, above), atol=1e-6
                )

    def test_weights_sum_to_one(self, random_volume, rng):
        """Adjoint contributions of a unit upstream sum to 1."""
        _, contrib = sample_trilinear_backward(random_volume, rng.uniform(0, 1, 3), np.ones(2))
        np.testing.assert_allclose(contrib.sum(axis=0), [1.0, 1.0])


class TestDensityVolume:
    """Tests for density volumes, integration and file I/O."""

    def test_rejects_negative_density(self):
        """Densities are nonnegative."""
        with pytest.raises(ContractError):
            DensityVolume(BoundingBox.unit(), -np.ones((2, 2, 2)))

    def test_constant_integrates_to_volume(self):
        """A constant field integrates to value * box volume."""
        box = BoundingBox(np.zeros(3), np.array([2.0, 1.0, 0.5]))
        assert integrate_trapezoid(np.full((5, 4, 3), 3.0), box) == pytest.approx(3.0)

    def test_bev_map_integrates_to_total(self, rng):
        """Summing the BEV map with trapezoid weights equals the volume total."""
        vol = DensityVolume(BoundingBox.unit(), rng.uniform(0, 1, (4, 4, 4)))
        bev = bev_density_map(vol)
        assert bev.shape == (4, 4)
        total = integrate_trapezoid(np.repeat(bev[..., None], 2, axis=2), BoundingBox.unit())
        assert total == pytest.approx(vol.total())

    def test_save_and_load(self, tmp_path, rng):
        """Volumes survive a round trip through raw f32 plus sidecar."""
        vol = DensityVolume(BoundingBox.unit(), rng.uniform(0, 1, (3, 3, 4)).astype(np.float32))
        save_volume(vol, tmp_path / "vol.f32")
        loaded = load_volume(tmp_path / "vol.f32")
        assert isinstance(loaded, DensityVolume)
        np.testing.assert_array_equal(loaded.values, vol.values)

    def test_loaded_density_keeps_channel_axis(self, tmp_path, rng):
        """A saved density volume loads with the same (X, Y, Z, 1) shape it had in memory."""
        vol = DensityVolume(BoundingBox.unit(), rng.uniform(0, 1, (4, 3, 2)).astype(np.float32))
        assert vol.values.shape == (4, 3, 2, 1)
        save_volume(vol, tmp_path / "vol.f32")
        assert load_volume(tmp_path / "vol.f32").values.shape == vol.values.shape

    def test_nonnegative_features_stay_features(self, tmp_path, rng):
        """The sidecar, not the values, decides the volume kind."""
        vol = FeatureVolume(BoundingBox.unit(), rng.uniform(0, 1, (2, 2, 2, 1)).astype(np.float32))
        save_volume(vol, tmp_path / "feat.f32")
        loaded = load_volume(tmp_path / "feat.f32")
        assert type(loaded) is FeatureVolume

    def test_unknown_kind_is_rejected(self, tmp_path):
        """A sidecar naming an unknown kind is a dataset error."""
        save_volume(FeatureVolume(BoundingBox.unit(), np.zeros((2, 2, 2, 1), dtype=np.float32)), tmp_path / "v.f32")
        sidecar = tmp_path / "v.json"
        sidecar.write_text(sidecar.read_text().replace('"feature"', '"mask"'))
        with pytest.raises(DatasetError):
            load_volume(tmp_path / "v.f32")
