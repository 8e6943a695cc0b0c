"""The counting model: image encoder -> feature volume -> field networks.

The scene feature volume is ``V = lift(encoder features) + V_free``, where
``V_free`` is a learnable grid shared by all scenes. Parameters live in one
``ParameterStore`` with canonical block order::

    volume, sdf.*, rgb.*, density.*, log_beta, encoder.*
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.encoder import (
    STRIDE,
    ConvNetParams,
    LiftPlan,
    apply_lift,
    build_lift_plan,
    conv_params_from,
    encode_views,
    init_conv_params,
    predict_density_map,
    register_encoder,
    sample_maps,
)
from src.errors import ContractError
from src.fields import (
    FieldArchitecture,
    FieldNets,
    field_nets_from,
    init_field_nets,
    phi_density,
    register_field_nets,
)
from src.geometry import intersect_bbox, pixel_center, rays_for_pixels, stratified_depths
from src.grad import tape
from src.grad.store import ParameterStore
from src.grad.tape import Array
from src.losses import RayTargets
from src.renderer import RayBatch, RenderResult, render_rays
from src.synth.dataset import SceneRecord
from src.volume import BoundingBox, integrate_trapezoid, node_positions, trilinear_features

Activation = Literal["relu", "softplus", "sharp_softplus"]


class ModelConfig(BaseModel):
    """Architecture and initialization of the counting model."""

    model_config = ConfigDict(extra="forbid")

    volume_dims: tuple[int, int, int] = (16, 16, 16)
    channels: int = Field(default=8, ge=1)
    hidden_width: int = Field(default=64, ge=1)
    hidden_layers: int = Field(default=2, ge=1)
    sdf_hidden_activation: Activation = "sharp_softplus"
    hidden_activation: Activation = "relu"
    encoder_activation: Activation = "relu"
    encoder_mid_channels: int = Field(default=8, ge=1)
    positional_encoding_freqs: int = Field(default=0, ge=0)
    sdf_init: Literal["geometric", "random", "zero"] = "geometric"
    sdf_init_radius: float | None = Field(default=None, gt=0)
    init_beta: float = Field(default=10.0, gt=0)
    init_scale: float = Field(default=1e-2, ge=0)
    lift_features: bool = True
    free_volume: bool = True
    free_volume_scale: float = Field(default=1e-2, ge=0)

    def architecture(self) -> FieldArchitecture:
        return FieldArchitecture(
            channels=self.channels,
            hidden_width=self.hidden_width,
            hidden_layers=self.hidden_layers,
            sdf_hidden_activation=self.sdf_hidden_activation,
            hidden_activation=self.hidden_activation,
            encoding_freqs=self.positional_encoding_freqs,
        )


@dataclass
class SceneEncoding:
    volume: Array  # (X, Y, Z, C)
    density_maps: Array  # (V, h, w)


@dataclass
class PreparedScene:
    """A scene with its lift plan and arrays cast to the working dtype."""

    record: SceneRecord
    plan: LiftPlan
    images: np.ndarray
    density_maps: np.ndarray
    gt_volume: np.ndarray  # (X, Y, Z, 1)

    @property
    def scene_id(self) -> str:
        return self.record.scene_id


@dataclass
class RaySample:
    """A training ray batch with the pixels it came from and its targets."""

    rays: RayBatch
    views: np.ndarray  # (R,)
    u: np.ndarray  # (R,) full-resolution x
    v: np.ndarray  # (R,) full-resolution y
    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)
    depth_valid: np.ndarray  # (R,)

    def targets(self, encoder_density: np.ndarray) -> RayTargets:
        return RayTargets(
            color=self.color,
            depth=self.depth,
            depth_valid=self.depth_valid,
            encoder_density=encoder_density,
        )

    def select(self, index: np.ndarray | slice) -> RaySample:
        return RaySample(
            rays=self.rays.select(index),
            views=self.views[index],
            u=self.u[index],
            v=self.v[index],
            color=self.color[index],
            depth=self.depth[index],
            depth_valid=self.depth_valid[index],
        )


class CountingModel:
    """Builds, names and evaluates the model's parameter blocks."""

    def __init__(self, config: ModelConfig, bbox: BoundingBox) -> None:
        self.config = config
        self.bbox = bbox
        self.arch = config.architecture()

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def init_params(self, rng: np.random.Generator, dtype: type = np.float32) -> ParameterStore:
        cfg = self.config
        volume_rng, field_rng, encoder_rng = rng.spawn(3)
        store = ParameterStore()
        if cfg.free_volume:
            values = volume_rng.standard_normal((*cfg.volume_dims, cfg.channels)) * cfg.free_volume_scale
            store.add("volume", values.astype(dtype))
        nets = init_field_nets(
            self.arch,
            field_rng,
            sdf_init=cfg.sdf_init,
            center=self.bbox.center,
            radius=cfg.sdf_init_radius or 0.5 * float(np.min(self.bbox.extent)),
            init_beta=cfg.init_beta,
            init_scale=cfg.init_scale,
            dtype=dtype,
        )
        register_field_nets(store, nets)
        conv = init_conv_params(
            cfg.channels,
            encoder_rng,
            mid_channels=cfg.encoder_mid_channels,
            hidden_activation=cfg.encoder_activation,
            dtype=dtype,
        )
        register_encoder(store, conv)
        return store

    def field_nets(self, params: Mapping[str, Array]) -> FieldNets:
        return field_nets_from(params, self.arch)

    def conv_params(self, params: Mapping[str, Array]) -> ConvNetParams:
        return conv_params_from(params, self.config.encoder_activation)

    def lr_scales(self, volume_lr_scale: float) -> dict[str, float]:
        return {"volume": volume_lr_scale} if self.config.free_volume else {}

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------

    def prepare(self, record: SceneRecord, dtype: type = np.float32) -> PreparedScene:
        h = record.images.shape[1] // STRIDE
        w = record.images.shape[2] // STRIDE
        plan = build_lift_plan(record.cameras, (h, w), self.bbox, self.config.volume_dims)
        return PreparedScene(
            record=record,
            plan=plan,
            images=record.images.astype(dtype),
            density_maps=record.density_maps.astype(dtype),
            gt_volume=record.density_volume.values.astype(dtype),
        )

    def encode(self, params: Mapping[str, Array], scene: PreparedScene) -> SceneEncoding:
        conv = self.conv_params(params)
        maps = encode_views(scene.images, conv)
        density_maps = predict_density_map(maps, conv)
        volume: Array | None = None
        if self.config.lift_features:
            volume = apply_lift(scene.plan, maps)
        if self.config.free_volume:
            volume = params["volume"] if volume is None else tape.add(volume, params["volume"])
        if volume is None:
            raise ContractError("Model has neither lifted nor free volume features")
        if isinstance(volume, tape.Tensor) and not tape.is_traced(dict(params)):
            volume = volume.data
        return SceneEncoding(volume=volume, density_maps=density_maps)

    def render(self, params: Mapping[str, Array], encoding: SceneEncoding, rays: RayBatch) -> RenderResult:
        return render_rays(encoding.volume, self.bbox, self.field_nets(params), rays)

    def node_density(self, params: Mapping[str, np.ndarray], volume: np.ndarray) -> np.ndarray:
        """phi_Density at every volume node, (X, Y, Z)."""
        dims = self.config.volume_dims
        nodes = node_positions(self.bbox, dims).reshape(-1, 3).astype(volume.dtype)
        feats = np.asarray(volume).reshape(-1, volume.shape[-1])
        density = phi_density(self.field_nets(params), nodes, feats)
        return np.asarray(density).reshape(dims)

    def predict_count(self, params: Mapping[str, np.ndarray], scene: PreparedScene) -> float:
        encoding = self.encode(params, scene)
        return integrate_trapezoid(self.node_density(params, encoding.volume), self.bbox)


# ---------------------------------------------------------------------------
# Ray sampling
# ---------------------------------------------------------------------------

def sample_training_rays(
    scene: PreparedScene,
    rays_per_view: int,
    samples: int,
    rng: np.random.Generator,
    bbox: BoundingBox,
    dtype: type = np.float32,
) -> RaySample:
    """Random pixels of every view, their rays clipped to ``bbox`` and the
    pixel targets. Rays that miss the box are dropped."""
    record = scene.record
    height, width = record.images.shape[1:3]
    views = np.repeat(np.arange(record.views), rays_per_view)
    cols = rng.integers(0, width, size=views.size)
    rows = rng.integers(0, height, size=views.size)
    u, v = pixel_center(cols, rows)

    origins = np.empty((views.size, 3))
    directions = np.empty((views.size, 3))
    for k, camera in enumerate(record.cameras):
        sel = views == k
        origins[sel], directions[sel] = rays_for_pixels(camera, u[sel], v[sel])
    t_near, t_far, hit = intersect_bbox(origins, directions, bbox)
    depths = stratified_depths(t_near, t_far, samples, rng)

    keep = np.flatnonzero(hit)
    return RaySample(
        rays=RayBatch(origins[keep], directions[keep], depths[keep]),
        views=views[keep],
        u=u[keep],
        v=v[keep],
        color=record.images[views[keep], rows[keep], cols[keep]].astype(dtype),
        depth=record.depth_prior[views[keep], rows[keep], cols[keep]].astype(dtype),
        depth_valid=record.accumulation[views[keep], rows[keep], cols[keep]] >= 0.5,
    )


def encoder_density_at(encoding: SceneEncoding, sample: RaySample, scale: float = 1.0) -> np.ndarray:
    """Encoder density at each ray's pixel, detached from the tape."""
    maps = encoding.density_maps
    maps = maps.data if isinstance(maps, tape.Tensor) else np.asarray(maps)
    return (scale * sample_maps(maps, sample.views, sample.u, sample.v)).astype(maps.dtype)


def gt_sample_density(scene: PreparedScene, bbox: BoundingBox, rays: RayBatch) -> np.ndarray:
    """Ground-truth volume density at every ray sample, (R, M)."""
    points = rays.points().reshape(-1, 3)
    values = trilinear_features(scene.gt_volume, bbox, points)
    return np.asarray(values).reshape(rays.size, rays.samples)
