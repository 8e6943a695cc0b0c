"""Whole-pipeline gradient check on a small random scene.

Builds a desk-scale model (smooth activations everywhere, random SDF init),
a random scene with four views, and compares reverse-mode gradients of the
full objective against 4th-order central differences in double precision.

The random SDF head is rescaled so that ``beta * sdf`` is centred with unit
spread over the volume; otherwise every opacity saturates. Rays are redrawn
when a pre-clamp opacity sits within ``kink_margin`` of the clamp, or when
any finite-difference evaluation flips an opacity across it.
"""

from __future__ import annotations

import math
import time
from collections.abc import Mapping

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from src.errors import ContractError
from src.fields import phi_sdf
from src.grad.check import (
    BlockReport,
    GradReport,
    finite_difference_grad,
    relative_error,
    value_and_grad,
)
from src.grad.store import ParameterStore
from src.grad.tape import Array
from src.losses import LossWeights, total_loss
from src.synth.dataset import SceneRecord
from src.synth.scene import SynthConfig, ring_cameras
from src.trainer.model import (
    CountingModel,
    ModelConfig,
    PreparedScene,
    RaySample,
    SceneEncoding,
    encoder_density_at,
    gt_sample_density,
    sample_training_rays,
)
from src.volume import DensityVolume, node_positions


class GradcheckConfig(BaseModel):
    """Scale, stencil and tolerance of a gradient check."""

    model_config = ConfigDict(extra="forbid")

    volume_dims: tuple[int, int, int] = (8, 8, 8)
    channels: int = Field(default=4, ge=1)
    hidden_width: int = Field(default=32, ge=1)
    hidden_layers: int = Field(default=2, ge=1)
    views: int = Field(default=4, ge=2)
    image_size: int = Field(default=16, ge=4)
    rays: int = Field(default=4, ge=1)
    samples: int = Field(default=8, ge=2)
    weights: LossWeights = Field(default_factory=LossWeights)
    init_scale: float = Field(default=0.3, ge=0)
    free_volume_scale: float = Field(default=0.1, ge=0)
    init_beta: float = Field(default=10.0, gt=0)
    step: float = Field(default=1e-4, gt=0)
    order: int = 4
    max_coords_per_block: int = Field(default=32, ge=1)
    tolerance: float = Field(default=1e-4, ge=0)
    error_floor: float = Field(default=1e-8, gt=0)
    kink_margin: float = Field(default=1e-7, ge=0)
    sdf_spread: float = Field(default=1.0, gt=0)
    extra_grad_floor: float = Field(default=1e-6, ge=0)
    max_resamples: int = Field(default=100, ge=0)

    def model(self) -> ModelConfig:
        return ModelConfig(
            volume_dims=self.volume_dims,
            channels=self.channels,
            hidden_width=self.hidden_width,
            hidden_layers=self.hidden_layers,
            sdf_hidden_activation="softplus",
            hidden_activation="softplus",
            encoder_activation="softplus",
            sdf_init="random",
            init_beta=self.init_beta,
            init_scale=self.init_scale,
            free_volume_scale=self.free_volume_scale,
        )


def random_scene_record(config: GradcheckConfig, rng: np.random.Generator) -> SceneRecord:
    """Random images, priors and ground truth on the default camera ring."""
    synth = SynthConfig(views=config.views, image_size=config.image_size)
    v, s = config.views, config.image_size
    return SceneRecord(
        scene_id="gradcheck",
        split="train",
        count=0,
        cameras=ring_cameras(synth),
        images=rng.uniform(0.0, 1.0, (v, s, s, 3)),
        depth_prior=rng.uniform(1.0, 2.5, (v, s, s)),
        accumulation=rng.uniform(0.0, 1.0, (v, s, s)),
        density_maps=rng.uniform(0.0, 0.1, (v, s // 4, s // 4)),
        density_volume=DensityVolume(synth.bbox, rng.uniform(0.0, 2.0, config.volume_dims)),
    )


def calibrate_sdf(
    model: CountingModel,
    params: ParameterStore,
    scene: PreparedScene,
    spread: float = 1.0,
) -> ParameterStore:
    """Rescale the SDF output layer so ``beta * sdf`` over the volume nodes
    has zero mean and standard deviation ``spread``."""
    values = params.as_dict()
    nets = model.field_nets(values)
    volume = np.asarray(model.encode(values, scene).volume)
    nodes = node_positions(model.bbox, model.config.volume_dims).reshape(-1, 3)
    sdf = np.asarray(phi_sdf(nets, nodes, volume.reshape(-1, volume.shape[-1])))
    beta = float(np.exp(values["log_beta"]))
    std = float(np.std(sdf))
    if std == 0.0:
        return params
    scale = spread / (beta * std)
    last = model.config.hidden_layers
    out = params.copy()
    out[f"sdf.{last}.weight"] = scale * params[f"sdf.{last}.weight"]
    out[f"sdf.{last}.bias"] = scale * (params[f"sdf.{last}.bias"] - float(np.mean(sdf)))
    return out


def _draw_rays(
    model: CountingModel,
    params: ParameterStore,
    scene: PreparedScene,
    config: GradcheckConfig,
    rng: np.random.Generator,
    budget: int,
) -> tuple[RaySample, int]:
    """Rays whose opacities all sit clear of the clamp, and the redraw count."""
    per_view = math.ceil(config.rays / config.views)
    encoding = model.encode(params.as_dict(), scene)
    for attempt in range(budget + 1):
        sample = sample_training_rays(scene, per_view, config.samples, rng, model.bbox, np.float64)
        sample = sample.select(slice(0, config.rays))
        if sample.rays.size == 0:
            continue
        raw = model.render(params.as_dict(), encoding, sample.rays).raw_alphas
        if np.all(np.abs(raw) > config.kink_margin):
            return sample, attempt
    raise ContractError(
        f"No ray draw kept every opacity {config.kink_margin} away from the clamp "
        f"after {config.max_resamples} attempts"
    )


def _select_coords(
    grad: np.ndarray, sl: slice, limit: int, floor: float, rng: np.random.Generator
) -> np.ndarray:
    """The block's largest gradients plus random others above ``floor``."""
    size = sl.stop - sl.start
    if size <= limit:
        return np.arange(sl.start, sl.stop)
    local = grad[sl]
    top = np.argsort(-np.abs(local), kind="stable")[: limit // 2]
    rest = np.setdiff1d(np.flatnonzero(np.abs(local) >= floor), top)
    extra = rng.choice(rest, size=min(limit - top.size, rest.size), replace=False)
    return sl.start + np.sort(np.concatenate([top, extra]).astype(np.int64))


def _compare(
    model: CountingModel,
    params: ParameterStore,
    scene: PreparedScene,
    encoding: SceneEncoding,
    sample: RaySample,
    config: GradcheckConfig,
    coord_seq: np.random.SeedSequence,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, bool]:
    """Loss value, both gradients, the checked coordinates and whether any
    evaluation moved an opacity across the clamp."""
    # Targets derived from the encoder are held fixed at the check point.
    targets = sample.targets(encoder_density_at(encoding, sample))
    gt_samples = gt_sample_density(scene, model.bbox, sample.rays)
    pattern = model.render(params.as_dict(), encoding, sample.rays).raw_alphas > 0
    crossed = False

    def loss_fn(blocks: Mapping[str, Array]) -> Array:
        nonlocal crossed
        enc = model.encode(blocks, scene)
        render = model.render(blocks, enc, sample.rays)
        crossed = crossed or bool(np.any((render.raw_alphas > 0) != pattern))
        loss, _ = total_loss(
            enc.density_maps, scene.density_maps, render, targets, gt_samples, config.weights
        )
        return loss

    value, analytic = value_and_grad(loss_fn, params)
    coord_rng = np.random.default_rng(coord_seq)
    limit, floor = config.max_coords_per_block, config.extra_grad_floor
    coords = np.concatenate(
        [_select_coords(analytic, sl, limit, floor, coord_rng) for _, sl in params.blocks()]
    )
    numeric = finite_difference_grad(loss_fn, params, config.step, coords=coords, order=config.order)
    return value, analytic, numeric, coords, crossed


def gradcheck(config: GradcheckConfig | None = None, seed: int = 0) -> GradReport:
    """Compare reverse-mode and finite-difference gradients block by block.

    Raises:
        NonFiniteLoss: The objective is not finite at the check point.
        ContractError: No ray draw stays clear of the opacity clamp.
    """
    config = config or GradcheckConfig()
    started = time.perf_counter()
    scene_seq, init_seq, ray_seq, coord_seq = np.random.SeedSequence(seed).spawn(4)
    record = random_scene_record(config, np.random.default_rng(scene_seq))
    model = CountingModel(config.model(), record.bbox)
    scene = model.prepare(record, np.float64)
    params = model.init_params(np.random.default_rng(init_seq), np.float64)
    params = calibrate_sdf(model, params, scene, config.sdf_spread)
    encoding = model.encode(params.as_dict(), scene)
    ray_rng = np.random.default_rng(ray_seq)

    resamples = 0
    while True:
        sample, redrawn = _draw_rays(
            model, params, scene, config, ray_rng, config.max_resamples - resamples
        )
        resamples += redrawn
        value, analytic, numeric, coords, crossed = _compare(
            model, params, scene, encoding, sample, config, coord_seq
        )
        if not crossed:
            break
        if resamples >= config.max_resamples:
            raise ContractError(
                f"Finite differences kept crossing the opacity clamp after {config.max_resamples} redraws"
            )
        resamples += 1
        logger.debug("Finite differences crossed the opacity clamp; redrawing rays")
    if resamples:
        logger.warning("Redrew gradcheck rays {} times to keep clear of the opacity clamp", resamples)

    layout = params.blocks()
    blocks = []
    for name, sl in layout:
        checked = coords[(coords >= sl.start) & (coords < sl.stop)]
        err = relative_error(analytic[checked], numeric[checked], config.error_floor)
        worst = int(np.argmax(err)) if err.size else 0
        max_err = float(err[worst]) if err.size else 0.0
        blocks.append(
            BlockReport(
                name=name,
                size=sl.stop - sl.start,
                checked=int(checked.size),
                max_rel_error=max_err,
                argmax=int(checked[worst] - sl.start) if err.size else 0,
                passed=max_err <= config.tolerance,
            )
        )
    report = GradReport(
        tolerance=config.tolerance,
        passed=all(b.passed for b in blocks),
        max_rel_error=max(b.max_rel_error for b in blocks),
        seed=seed,
        resamples=resamples,
        blocks=blocks,
    )
    logger.info(
        "Gradcheck {} (loss {:.6g}, max rel. error {:.3g}, {} coordinates, {:.1f}s)",
        "passed" if report.passed else "FAILED",
        value,
        report.max_rel_error,
        coords.size,
        time.perf_counter() - started,
    )
    return report
