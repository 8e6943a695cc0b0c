"""Training objective: fully supervised terms plus self-supervised consistency.

FSL compares the encoder's density maps with ground-truth maps and the
rendered per-sample densities with the ground-truth density volume. SSL
compares rendered density with the (constant) encoder prediction at the ray's
pixel, rendered depth with the depth prior and rendered colour with the image.
A term whose weight is zero is never evaluated, so it contributes neither
value nor gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.errors import ContractError, EmptyInput
from src.grad import tape
from src.grad.tape import Array, Tensor, is_traced
from src.renderer import RenderResult
from src.volume import DensityVolume

FSL_TERMS = ("dmap", "dvol")
SSL_TERMS = ("rdens", "depth", "rgb")


class LossWeights(BaseModel):
    """Per-term multipliers; all default to 1."""

    model_config = ConfigDict(extra="forbid")

    dmap: float = Field(default=1.0, ge=0.0)
    dvol: float = Field(default=1.0, ge=0.0)
    rdens: float = Field(default=1.0, ge=0.0)
    depth: float = Field(default=1.0, ge=0.0)
    rgb: float = Field(default=1.0, ge=0.0)

    def without_fsl(self) -> LossWeights:
        return self.model_copy(update={"dmap": 0.0, "dvol": 0.0})

    @property
    def ssl_active(self) -> bool:
        return any(getattr(self, name) > 0 for name in SSL_TERMS)


class LossReport(BaseModel):
    """Weighted term values of one evaluation of the objective."""

    dmap: float = 0.0
    dvol: float = 0.0
    rdens: float = 0.0
    depth: float = 0.0
    rgb: float = 0.0
    fsl: float = 0.0
    ssl: float = 0.0
    total: float = 0.0
    rays: int = 0
    depth_valid_rays: int = 0
    labeled: bool = True


@dataclass
class SupervisionBundle:
    """Ground truth of one scene."""

    density_maps: np.ndarray  # (V, h, w), D_gt
    images: np.ndarray  # (V, H, W, 3), C_gt
    depth_prior: np.ndarray  # (V, H, W), Z_prior
    accumulation: np.ndarray  # (V, H, W), oracle sum of weights
    density_volume: DensityVolume  # d_gt

    def __post_init__(self) -> None:
        if np.any(self.density_maps < 0):
            raise ContractError("Ground-truth density maps must be nonnegative")
        if self.images.shape[:3] != self.depth_prior.shape or self.depth_prior.shape != self.accumulation.shape:
            raise ContractError("Images, depth prior and accumulation maps must share (V, H, W)")


@dataclass
class RayTargets:
    """Per-ray SSL targets gathered at the ray's pixel."""

    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)
    depth_valid: np.ndarray  # (R,) bool, oracle accumulation >= 0.5
    encoder_density: np.ndarray  # (R,), constant


def mse(a: Array, b: Array) -> Array:
    """Mean squared difference; Tensor when either input is one."""
    a_shape = np.shape(a.data if isinstance(a, Tensor) else a)
    b_shape = np.shape(b.data if isinstance(b, Tensor) else b)
    if a_shape != b_shape:
        raise ContractError(f"MSE operands differ in shape: {a_shape} vs {b_shape}")
    if int(np.prod(a_shape)) == 0:
        raise EmptyInput("MSE over an empty array")
    out = tape.mean(tape.square(tape.sub(a, b)))
    return out if is_traced(a, b) else out.data


def fsl_loss(
    encoder_maps: Array,
    gt_maps: np.ndarray,
    sample_density: Array,
    gt_sample_density: np.ndarray,
    weights: LossWeights,
) -> tuple[Array, dict[str, float]]:
    """``dmap * MSE(D_enc, D_gt) + dvol * MSE(d_i, d_gt_i)``.

    The map term averages over views and cells; the volume term over every
    sample of every ray.
    """
    terms: dict[str, Array] = {}
    if weights.dmap > 0:
        terms["dmap"] = tape.mul(mse(encoder_maps, gt_maps), weights.dmap)
    if weights.dvol > 0:
        terms["dvol"] = tape.mul(mse(sample_density, gt_sample_density), weights.dvol)
    return _sum_terms(terms)


def ssl_loss(
    render: RenderResult,
    targets: RayTargets,
    weights: LossWeights,
) -> tuple[Array, dict[str, float]]:
    """Rendered density, depth and colour against their per-ray targets.

    Depth is averaged only over rays whose prior is valid; no valid ray makes
    the depth term zero.
    """
    terms: dict[str, Array] = {}
    if weights.rdens > 0:
        terms["rdens"] = tape.mul(mse(render.density, targets.encoder_density), weights.rdens)
    if weights.depth > 0 and np.any(targets.depth_valid):
        valid = np.flatnonzero(targets.depth_valid)
        terms["depth"] = tape.mul(mse(render.depth[valid], targets.depth[valid]), weights.depth)
    if weights.rgb > 0:
        terms["rgb"] = tape.mul(mse(render.color, targets.color), weights.rgb)
    return _sum_terms(terms)


def _sum_terms(terms: dict[str, Array]) -> tuple[Array, dict[str, float]]:
    values = {name: float(tape.as_tensor(t).data) for name, t in terms.items()}
    total: Array | None = None
    for term in terms.values():
        total = term if total is None else tape.add(total, term)
    return (tape.as_tensor(0.0) if total is None else total), values


def total_loss(
    encoder_maps: Array,
    gt_maps: np.ndarray,
    render: RenderResult,
    targets: RayTargets,
    gt_sample_density: np.ndarray,
    weights: LossWeights,
    labeled: bool = True,
) -> tuple[Array, LossReport]:
    """``L_FSL + L_SSL``; unlabeled scenes drop both FSL terms."""
    active = weights if labeled else weights.without_fsl()
    fsl, fsl_terms = fsl_loss(encoder_maps, gt_maps, render.sample_density, gt_sample_density, active)
    ssl, ssl_terms = ssl_loss(render, targets, active)
    total = tape.add(fsl, ssl)
    report = LossReport(
        **fsl_terms,
        **ssl_terms,
        fsl=float(tape.as_tensor(fsl).data),
        ssl=float(tape.as_tensor(ssl).data),
        total=float(tape.as_tensor(total).data),
        rays=int(targets.depth.shape[0]),
        depth_valid_rays=int(np.count_nonzero(targets.depth_valid)),
        labeled=labeled,
    )
    if not total.requires_grad:
        return total.data, report
    return total, report
