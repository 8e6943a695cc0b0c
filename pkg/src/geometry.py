"""Pinhole cameras, ray generation, projection and stratified depth sampling.

Conventions used everywhere in the package:

* Right-handed world frame. The camera looks down +z of its own frame, with
  +x to the right and +y down the image.
* ``rotation`` maps world to camera coordinates, ``p_cam = R p + t``; the
  camera centre is ``-R^T t``.
* Image coordinates are continuous. Integer pixel ``(i, j)`` is the square
  ``[i, i+1) x [j, j+1)`` and its ray goes through ``pixel_center(i, j)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.errors import ContractError, DatasetError, PointBehindCamera
from src.formats import atomic_write_text
from src.volume import BoundingBox

DEPTH_EPS = 1e-6


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with world->camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ContractError(f"Image size must be at least 1x1, got {self.width}x{self.height}")
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-9, rtol=0):
            raise ContractError("Camera rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-9:
            raise ContractError("Camera rotation must have determinant +1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, factor: float) -> CameraModel:
        """Same pose with intrinsics and image size scaled by ``factor``.

        Used to address feature maps at a fraction of the image resolution.
        """
        return CameraModel(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
            rotation=self.rotation,
            translation=self.translation,
        )

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, data: dict) -> CameraModel:
        return cls(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
            rotation=np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(data["translation"], dtype=np.float64),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = float("inf")

    def __post_init__(self) -> None:
        direction = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", direction)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise ContractError(f"Ray direction must be unit length, got norm {np.linalg.norm(direction)}")
        if not 0.0 <= self.t_near < self.t_far:
            raise ContractError(f"Ray interval must satisfy 0 <= t_near < t_far, got [{self.t_near}, {self.t_far}]")

    def at(self, t: np.ndarray | float) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class RaySamples:
    depths: np.ndarray
    points: np.ndarray


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

def look_at_camera(
    eye: np.ndarray,
    target: np.ndarray,
    up: np.ndarray,
    fx: float,
    fy: float,
    cx: float,
    cy: float,
    width: int,
    height: int,
) -> CameraModel:
    """Camera at ``eye`` looking at ``target``; ``up`` points up in the image."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise ContractError("Up vector is parallel to the viewing direction")
    right /= norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return CameraModel(fx, fy, cx, cy, width, height, rotation, -rotation @ eye)


def load_camera(path: Path | str) -> CameraModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"Cannot read camera file ({exc})", path) from exc
    try:
        return CameraModel.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"Malformed camera file ({exc})", path) from exc


def save_camera(camera: CameraModel, path: Path | str) -> None:
    atomic_write_text(path, json.dumps(camera.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Rays and projection
# ---------------------------------------------------------------------------

def pixel_center(i: int | np.ndarray, j: int | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(i, dtype=np.float64) + 0.5, np.asarray(j, dtype=np.float64) + 0.5


def rays_for_pixels(camera: CameraModel, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ray generation.

    Returns:
        ``(origins, directions)``, each shaped ``u.shape + (3,)``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cam_dirs = np.stack(
        [(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1
    )
    world = cam_dirs @ camera.rotation
    world /= np.linalg.norm(world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, world.shape).copy()
    return origins, world


def ray_for_pixel(camera: CameraModel, u: float, v: float) -> Ray:
    """Ray from the camera centre through continuous image point ``(u, v)``."""
    if not (0.0 <= u < camera.width and 0.0 <= v < camera.height):
        raise ContractError(f"Pixel ({u}, {v}) outside {camera.width}x{camera.height} frame")
    origins, directions = rays_for_pixels(camera, np.array(u), np.array(v))
    return Ray(origins, directions)


def project_points(camera: CameraModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points without raising.

    Returns:
        ``(u, v, z)``. Entries with ``z <= DEPTH_EPS`` carry NaN pixel
        coordinates.
    """
    cam = np.asarray(points, dtype=np.float64) @ camera.rotation.T + camera.translation
    z = cam[..., 2]
    front = z > DEPTH_EPS
    safe_z = np.where(front, z, 1.0)
    u = np.where(front, camera.fx * cam[..., 0] / safe_z + camera.cx, np.nan)
    v = np.where(front, camera.fy * cam[..., 1] / safe_z + camera.cy, np.nan)
    return u, v, z


def project_point(camera: CameraModel, p: np.ndarray) -> tuple[float, float, float]:
    u, v, z = project_points(camera, np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not z[0] > DEPTH_EPS:
        raise PointBehindCamera(float(z[0]))
    return float(u[0]), float(v[0]), float(z[0])


def in_frame(camera: CameraModel, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """True where ``(u, v)`` is a finite point inside the image."""
    with np.errstate(invalid="ignore"):
        return (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)


# ---------------------------------------------------------------------------
# Bounding-box clipping and depth sampling
# ---------------------------------------------------------------------------

def intersect_bbox(
    origins: np.ndarray, directions: np.ndarray, bbox: BoundingBox
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab intersection of rays with ``bbox``.

    Returns:
        ``(t_near, t_far, hit)``; ``t_near`` is clamped at 0 so rays starting
        inside the box begin at their origin.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (bbox.min - origins) * inv
        t1 = (bbox.max - origins) * inv
    # a zero direction component starting on a slab face yields NaN: unbounded
    degenerate = np.isnan(t0) | np.isnan(t1)
    lo = np.where(degenerate, -np.inf, np.minimum(t0, t1))
    hi = np.where(degenerate, np.inf, np.maximum(t0, t1))
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    return t_near, t_far, t_far > t_near


def clip_ray(ray: Ray, bbox: BoundingBox) -> Ray | None:
    """Restrict a ray to its segment inside ``bbox``; None when it misses."""
    t_near, t_far, hit = intersect_bbox(ray.origin[None], ray.direction[None], bbox)
    lo = max(float(t_near[0]), ray.t_near)
    hi = min(float(t_far[0]), ray.t_far)
    if not hit[0] or hi <= lo:
        return None
    return Ray(ray.origin, ray.direction, lo, hi)


def stratified_depths(
    t_near: np.ndarray, t_far: np.ndarray, samples: int, rng: np.random.Generator
) -> np.ndarray:
    """One uniform draw in each of ``samples`` equal bins per interval.

    Returns:
        Array shaped ``t_near.shape + (samples,)``, ascending along the last axis.
    """
    if samples < 1:
        raise ContractError(f"Need at least one sample per ray, got {samples}")
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    width = (t_far - t_near)[..., None] / samples
    jitter = rng.random(t_near.shape + (samples,))
    return t_near[..., None] + (np.arange(samples) + jitter) * width


def sample_ray_depths(ray: Ray, samples: int, rng: np.random.Generator) -> RaySamples:
    if not np.isfinite(ray.t_far):
        raise ContractError("Ray must have a finite far bound before sampling; clip it to a bbox first")
    depths = stratified_depths(np.array(ray.t_near), np.array(ray.t_far), samples, rng)
    return RaySamples(depths=depths, points=ray.at(depths))
