"""Scene feature volume: a node-centred grid with trilinear sampling.

Node ``(i, j, k)`` sits at ``bbox.min + (i, j, k) * cell`` with
``cell = extent / (dims - 1)``, so the outermost nodes lie on the box faces.
Values are stored ``(X, Y, Z, C)`` in C order, which makes the flat node index
``(i * Y + j) * Z + k`` (x-major).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.errors import ContractError, DatasetError
from src.formats import read_json, read_raw_f32, write_json, write_raw_f32
from src.grad.tape import Array, as_tensor, make_op, scatter_add_rows, unwrap_unless_traced

# Corner order shared by forward and backward: (dx, dy, dz) with dz fastest.
CORNERS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


@dataclass(frozen=True)
class BoundingBox:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)
        if not np.all(lo < hi):
            raise ContractError(f"Bounding box min {lo.tolist()} must be below max {hi.tolist()}")

    @classmethod
    def unit(cls) -> BoundingBox:
        return cls(np.zeros(3), np.ones(3))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.min) & (points <= self.max), axis=-1)

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> BoundingBox:
        return cls(np.asarray(data["min"]), np.asarray(data["max"]))


@dataclass(frozen=True)
class FeatureVolume:
    bbox: BoundingBox
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 4:
            raise ContractError(f"Volume values must be (X, Y, Z, C), got shape {values.shape}")
        if min(values.shape[:3]) < 2 or values.shape[3] < 1:
            raise ContractError(f"Volume needs >= 2 nodes per axis and >= 1 channel, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ContractError("Volume values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def dims(self) -> tuple[int, int, int]:
        x, y, z = self.values.shape[:3]
        return x, y, z

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    @property
    def cell(self) -> np.ndarray:
        return cell_size(self.bbox, self.dims)


@dataclass(frozen=True)
class DensityVolume(FeatureVolume):
    """Single-channel volume of persons per unit volume."""

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim == 3:
            values = values[..., None]
        object.__setattr__(self, "values", values)
        super().__post_init__()
        if self.channels != 1:
            raise ContractError(f"Density volume must have one channel, got {self.channels}")
        if np.any(self.values < 0):
            raise ContractError("Density volume values must be nonnegative")

    @property
    def density(self) -> np.ndarray:
        return self.values[..., 0]

    def total(self) -> float:
        return integrate_trapezoid(self.density, self.bbox)


# ---------------------------------------------------------------------------
# Grid addressing
# ---------------------------------------------------------------------------

def cell_size(bbox: BoundingBox, dims: tuple[int, int, int]) -> np.ndarray:
    return bbox.extent / (np.asarray(dims, dtype=np.float64) - 1.0)


def node_positions(bbox: BoundingBox, dims: tuple[int, int, int]) -> np.ndarray:
    """World position of every node, shaped ``(X, Y, Z, 3)``."""
    axes = [np.linspace(bbox.min[a], bbox.max[a], dims[a]) for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def world_to_grid(
    bbox: BoundingBox, dims: tuple[int, int, int], points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Continuous grid coordinates, unclamped, plus an out-of-bounds flag."""
    points = np.asarray(points, dtype=np.float64)
    grid = (points - bbox.min) / cell_size(bbox, dims)
    upper = np.asarray(dims, dtype=np.float64) - 1.0
    outside = np.any((grid < 0) | (grid > upper), axis=-1)
    return grid, outside


def corner_weights(
    bbox: BoundingBox, dims: tuple[int, int, int], points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Flat node indices and trilinear weights of the 8 enclosing nodes.

    Queries outside the box are clamped to its faces.

    Returns:
        ``(index, weight)``, both shaped ``(N, 8)`` in ``CORNERS`` order.
    """
    dims_arr = np.asarray(dims, dtype=np.int64)
    grid, _ = world_to_grid(bbox, dims, np.asarray(points).reshape(-1, 3))
    grid = np.clip(grid, 0.0, dims_arr - 1)
    base = np.minimum(np.floor(grid).astype(np.int64), dims_arr - 2)
    frac = grid - base

    nodes = base[:, None, :] + CORNERS[None, :, :]
    per_axis = np.where(CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    weight = per_axis.prod(axis=-1)
    index = (nodes[..., 0] * dims_arr[1] + nodes[..., 1]) * dims_arr[2] + nodes[..., 2]
    return index, weight


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def trilinear_features(values: Array, bbox: BoundingBox, points: np.ndarray) -> Array:
    """Sample an ``(X, Y, Z, C)`` grid at ``points`` (N, 3) -> (N, C).

    Differentiable with respect to ``values``; the adjoint scatters the
    upstream gradient to the 8 enclosing nodes in corner order.
    """
    grid = as_tensor(values)
    dims = grid.shape[:3]
    channels = grid.shape[3]
    n_nodes = int(np.prod(dims))
    index, weight = corner_weights(bbox, dims, points)
    weight = weight.astype(grid.dtype, copy=False)
    flat = grid.data.reshape(n_nodes, channels)
    out = np.einsum("nk,nkc->nc", weight, flat[index])

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        contrib = weight.T[:, :, None] * g[None, :, :]
        full = scatter_add_rows(n_nodes, index.T.ravel(), contrib.reshape(-1, channels))
        return (full.reshape(grid.shape).astype(grid.dtype, copy=False),)

    return unwrap_unless_traced(make_op(out, (grid,), backward, "trilinear"), values)


def sample_trilinear(vol: FeatureVolume, p: np.ndarray) -> np.ndarray:
    """Feature vector at one point (C,) or at a batch of points (N, C)."""
    p = np.asarray(p, dtype=np.float64)
    out = trilinear_features(vol.values, vol.bbox, p.reshape(-1, 3))
    return out[0] if p.ndim == 1 else out


def sample_trilinear_backward(
    vol: FeatureVolume, p: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of ``sample_trilinear`` at a single point.

    Returns:
        ``(nodes, contributions)``: the (8, 3) integer node coordinates and the
        (8, C) gradient each receives.
    """
    index, weight = corner_weights(vol.bbox, vol.dims, np.asarray(p).reshape(1, 3))
    nodes = np.stack(np.unravel_index(index[0], vol.dims), axis=-1)
    contributions = weight[0][:, None] * np.asarray(upstream, dtype=np.float64)[None, :]
    return nodes, contributions


def scatter_to_grid(vol: FeatureVolume, nodes: np.ndarray, contributions: np.ndarray) -> np.ndarray:
    """Dense gradient grid from ``sample_trilinear_backward`` output."""
    out = np.zeros(vol.values.shape, dtype=np.float64)
    np.add.at(out, (nodes[:, 0], nodes[:, 1], nodes[:, 2]), contributions)
    return out


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def _trapezoid_weights(n: int, step: float) -> np.ndarray:
    w = np.full(n, step)
    w[[0, -1]] = 0.5 * step
    return w


def integrate_trapezoid(values: np.ndarray, bbox: BoundingBox) -> float:
    """Trapezoidal integral of node values ``(X, Y, Z)`` over the box."""
    dims = values.shape[:3]
    cell = cell_size(bbox, dims)
    wx, wy, wz = (_trapezoid_weights(dims[a], cell[a]) for a in range(3))
    return float(np.einsum("ijk,i,j,k->", values, wx, wy, wz))


def bev_density_map(vol: DensityVolume) -> np.ndarray:
    """Collapse density along z: persons per unit ground area, shaped (X, Y)."""
    wz = _trapezoid_weights(vol.dims[2], float(vol.cell[2]))
    return np.einsum("ijk,k->ij", vol.density, wz)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_volume(vol: FeatureVolume, path: Path | str) -> None:
    """Raw little-endian f32 in node order plus a JSON sidecar."""
    path = Path(path)
    write_raw_f32(path, vol.values)
    write_json(
        _sidecar(path),
        {
            "kind": "density" if isinstance(vol, DensityVolume) else "feature",
            "dims": list(vol.dims),
            "channels": vol.channels,
            "bbox": vol.bbox.to_dict(),
        },
    )


def load_volume(path: Path | str) -> FeatureVolume:
    path = Path(path)
    meta = read_json(_sidecar(path))
    try:
        dims = tuple(int(d) for d in meta["dims"])
        channels = int(meta["channels"])
        bbox = BoundingBox.from_dict(meta["bbox"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"Malformed volume sidecar ({exc})", _sidecar(path)) from exc
    kind = meta.get("kind", "feature")
    if kind not in ("density", "feature"):
        raise DatasetError(f"Unknown volume kind {kind!r}", _sidecar(path))
    values = read_raw_f32(path, int(np.prod(dims)) * channels).reshape(*dims, channels)
    if kind == "density":
        return DensityVolume(bbox, values)
    return FeatureVolume(bbox, values)
