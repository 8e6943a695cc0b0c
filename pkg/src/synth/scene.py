"""Synthetic crowd scenes with analytic SDF, density and colour.

A person is a vertical capsule standing on the ground plane with a spherical
head on top; the head centre is the point that carries the person's unit of
density mass. Scenes can also hold plain spheres, which tests use as analytic
references.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import ContractError
from src.geometry import CameraModel, look_at_camera
from src.volume import BoundingBox


class SynthConfig(BaseModel):
    """Dataset generation settings (desk-scale defaults)."""

    model_config = ConfigDict(extra="forbid")

    num_scenes: int = Field(default=24, ge=0)
    entities_min: int = Field(default=3, ge=0)
    entities_max: int = Field(default=12, ge=0)
    body: Literal["capsule", "sphere"] = "capsule"
    body_radius: float = Field(default=0.04, gt=0)
    body_height_ratio: float = Field(default=8.0, gt=2)
    head_radius: float = Field(default=0.05, gt=0)
    blob_sigma: float | None = Field(default=None, gt=0)
    min_spacing: float = Field(default=0.1, ge=0)
    placement_margin: float = Field(default=0.2, ge=0, lt=0.5)

    views: int = Field(default=4, ge=2)
    image_size: int = Field(default=32, ge=4)
    fov_deg: float = Field(default=50.0, gt=0, lt=180)
    camera_radius: float = Field(default=1.6, gt=0)
    camera_height: float = 1.2
    look_at: tuple[float, float, float] = (0.5, 0.5, 0.2)

    bbox_min: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bbox_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ground_plane: bool = True
    ground_height: float = 0.05
    ground_albedo: float = Field(default=0.5, ge=0, le=1)

    splat_sigma_cells: float = Field(default=2.0, gt=0)
    density_volume_dims: tuple[int, int, int] = (16, 16, 16)
    oracle_samples: int = Field(default=512, ge=2)
    oracle_beta: float = Field(default=200.0, gt=0)
    val_fraction: float = Field(default=0.25, ge=0, lt=1)
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check(self) -> SynthConfig:
        if self.entities_min > self.entities_max:
            raise ValueError("entities_min must not exceed entities_max")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if min(self.density_volume_dims) < 2:
            raise ValueError("density_volume_dims needs at least 2 nodes per axis")
        return self

    @property
    def bbox(self) -> BoundingBox:
        return BoundingBox(np.array(self.bbox_min), np.array(self.bbox_max))

    @property
    def sigma(self) -> float:
        return self.blob_sigma if self.blob_sigma is not None else self.head_radius


# ---------------------------------------------------------------------------
# Scene types
# ---------------------------------------------------------------------------

@dataclass
class Entity:
    kind: Literal["sphere", "capsule"]
    center: np.ndarray
    radius: float
    albedo: np.ndarray
    head: np.ndarray
    sigma: float
    axis_a: np.ndarray | None = None
    axis_b: np.ndarray | None = None
    head_radius: float = 0.0

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ContractError(f"Blob sigma must be positive, got {self.sigma}")
        if self.kind == "capsule" and (self.axis_a is None or self.axis_b is None):
            raise ContractError("Capsule entities need both axis endpoints")

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "center": self.center.tolist(),
            "radius": float(self.radius),
            "albedo": self.albedo.tolist(),
            "head": self.head.tolist(),
            "sigma": float(self.sigma),
            "head_radius": float(self.head_radius),
        }
        if self.kind == "capsule":
            out["axis_a"] = self.axis_a.tolist()
            out["axis_b"] = self.axis_b.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> Entity:
        def arr(key: str) -> np.ndarray | None:
            return np.asarray(data[key], dtype=np.float64) if key in data else None

        return cls(
            kind=data["kind"],
            center=arr("center"),
            radius=float(data["radius"]),
            albedo=arr("albedo"),
            head=arr("head"),
            sigma=float(data["sigma"]),
            axis_a=arr("axis_a"),
            axis_b=arr("axis_b"),
            head_radius=float(data.get("head_radius", 0.0)),
        )


@dataclass
class SceneSpec:
    bbox: BoundingBox
    entities: list[Entity] = field(default_factory=list)
    cameras: list[CameraModel] = field(default_factory=list)
    ground_plane: bool = False
    ground_height: float = 0.0
    ground_albedo: float = 0.5

    @property
    def count(self) -> int:
        return len(self.entities)

    def to_dict(self) -> dict:
        return {
            "bbox": self.bbox.to_dict(),
            "entities": [e.to_dict() for e in self.entities],
            "cameras": [c.to_dict() for c in self.cameras],
            "ground_plane": self.ground_plane,
            "ground_height": float(self.ground_height),
            "ground_albedo": float(self.ground_albedo),
        }

    @classmethod
    def from_dict(cls, data: dict) -> SceneSpec:
        return cls(
            bbox=BoundingBox.from_dict(data["bbox"]),
            entities=[Entity.from_dict(e) for e in data["entities"]],
            cameras=[CameraModel.from_dict(c) for c in data["cameras"]],
            ground_plane=bool(data["ground_plane"]),
            ground_height=float(data["ground_height"]),
            ground_albedo=float(data["ground_albedo"]),
        )


def sphere_entity(center: np.ndarray, radius: float, albedo: np.ndarray | None = None, sigma: float = 0.1) -> Entity:
    center = np.asarray(center, dtype=np.float64)
    return Entity(
        kind="sphere",
        center=center,
        radius=float(radius),
        albedo=np.full(3, 0.8) if albedo is None else np.asarray(albedo, dtype=np.float64),
        head=center.copy(),
        sigma=sigma,
    )


def person_entity(config: SynthConfig, xy: np.ndarray, albedo: np.ndarray) -> Entity:
    r = config.body_radius
    base = config.ground_height if config.ground_plane else config.bbox_min[2]
    height = config.body_height_ratio * r
    a = np.array([xy[0], xy[1], base + r])
    b = np.array([xy[0], xy[1], base + height - r])
    head = np.array([xy[0], xy[1], base + height + config.head_radius])
    return Entity(
        kind="capsule",
        center=0.5 * (a + b),
        radius=r,
        albedo=albedo,
        head=head,
        sigma=config.sigma,
        axis_a=a,
        axis_b=b,
        head_radius=config.head_radius,
    )


# ---------------------------------------------------------------------------
# Analytic fields
# ---------------------------------------------------------------------------

def _capsule_sdf(p: np.ndarray, a: np.ndarray, b: np.ndarray, r: float) -> np.ndarray:
    pa = p - a
    ba = b - a
    h = np.clip(pa @ ba / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - r


def _component_sdfs(scene: SceneSpec, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """SDF of every surface component and its albedo.

    Returns:
        ``(sdfs, albedos)`` shaped (K, ...) and (K, 3).
    """
    p = np.asarray(p, dtype=np.float64)
    sdfs: list[np.ndarray] = []
    albedos: list[np.ndarray] = []
    for e in scene.entities:
        if e.kind == "sphere":
            sdfs.append(np.linalg.norm(p - e.center, axis=-1) - e.radius)
        else:
            sdfs.append(_capsule_sdf(p, e.axis_a, e.axis_b, e.radius))
        albedos.append(e.albedo)
        if e.head_radius > 0:
            sdfs.append(np.linalg.norm(p - e.head, axis=-1) - e.head_radius)
            albedos.append(e.albedo)
    if scene.ground_plane:
        sdfs.append(p[..., 2] - scene.ground_height)
        albedos.append(np.full(3, scene.ground_albedo))
    if not sdfs:
        return np.full((1,) + p.shape[:-1], np.inf), np.zeros((1, 3))
    return np.stack(sdfs), np.stack(albedos)


def analytic_sdf(scene: SceneSpec, p: np.ndarray) -> np.ndarray:
    """Union of all surfaces: pointwise minimum of component SDFs."""
    sdfs, _ = _component_sdfs(scene, p)
    return sdfs.min(axis=0)


def analytic_color(scene: SceneSpec, p: np.ndarray) -> np.ndarray:
    """Albedo of the surface nearest to each point."""
    sdfs, albedos = _component_sdfs(scene, p)
    return albedos[np.argmin(sdfs, axis=0)]


def analytic_density(scene: SceneSpec, p: np.ndarray) -> np.ndarray:
    """Sum of unit-mass isotropic Gaussians centred on the heads."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros(p.shape[:-1])
    for e in scene.entities:
        sq = np.sum((p - e.head) ** 2, axis=-1)
        out += (2.0 * np.pi * e.sigma**2) ** -1.5 * np.exp(-sq / (2.0 * e.sigma**2))
    return out


# ---------------------------------------------------------------------------
# Random scenes and camera rigs
# ---------------------------------------------------------------------------

def ring_cameras(config: SynthConfig) -> list[CameraModel]:
    """Cameras evenly spaced on a horizontal circle, all aimed at ``look_at``."""
    size = config.image_size
    focal = 0.5 * size / np.tan(np.radians(config.fov_deg) / 2.0)
    target = np.asarray(config.look_at, dtype=np.float64)
    cameras = []
    for k in range(config.views):
        angle = 2.0 * np.pi * k / config.views + np.pi / 4.0
        eye = np.array(
            [
                target[0] + config.camera_radius * np.cos(angle),
                target[1] + config.camera_radius * np.sin(angle),
                config.camera_height,
            ]
        )
        cameras.append(
            look_at_camera(eye, target, np.array([0.0, 0.0, 1.0]), focal, focal, size / 2, size / 2, size, size)
        )
    return cameras


def _place(config: SynthConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    lo = np.array(config.bbox_min[:2]) + config.placement_margin * (
        np.array(config.bbox_max[:2]) - np.array(config.bbox_min[:2])
    )
    hi = np.array(config.bbox_max[:2]) - (lo - np.array(config.bbox_min[:2]))
    placed: list[np.ndarray] = []
    for _ in range(count):
        candidate = rng.uniform(lo, hi)
        for _ in range(200):
            if all(np.linalg.norm(candidate - q) >= config.min_spacing for q in placed):
                break
            candidate = rng.uniform(lo, hi)
        placed.append(candidate)
    return np.array(placed).reshape(count, 2)


def random_scene(config: SynthConfig, rng: np.random.Generator) -> SceneSpec:
    count = int(rng.integers(config.entities_min, config.entities_max + 1))
    positions = _place(config, count, rng)
    entities = []
    for xy in positions:
        albedo = rng.uniform(0.2, 0.95, size=3)
        if config.body == "capsule":
            entities.append(person_entity(config, xy, albedo))
        else:
            base = config.ground_height if config.ground_plane else config.bbox_min[2]
            center = np.array([xy[0], xy[1], base + config.body_radius])
            entities.append(sphere_entity(center, config.body_radius, albedo, config.sigma))
    return SceneSpec(
        bbox=config.bbox,
        entities=entities,
        cameras=ring_cameras(config),
        ground_plane=config.ground_plane,
        ground_height=config.ground_height,
        ground_albedo=config.ground_albedo,
    )
