"""Differentiable SDF-based volume rendering.

For M samples along a ray the SDF pairs ``(s_k, s_{k+1})`` give M-1 opacities

    alpha_k = max((delta(s_k) - delta(s_{k+1})) / delta(s_k), 0)

with ``delta`` the learnable-sharpness sigmoid. Occlusion weights are
``w_i = T_i * alpha_i`` with transmittance ``T_i = prod_{k<i} (1 - alpha_k)``,
and depth, colour and density are the raw weighted sums of the first M-1
samples' values. Nothing is normalized by the weight total; rays through empty
space composite to zero (black background).
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from loguru import logger

from src.errors import ContractError
from src.fields import FieldNets, logistic_delta, phi_density, phi_rgb, phi_sdf
from src.geometry import (
    CameraModel,
    Ray,
    clip_ray,
    intersect_bbox,
    pixel_center,
    rays_for_pixels,
    sample_ray_depths,
    stratified_depths,
)
from src.grad import tape
from src.grad.tape import Array, Tensor, is_traced
from src.volume import BoundingBox, FeatureVolume, trilinear_features

DELTA_EPS = 1e-9

SdfFn = Callable[[np.ndarray], Array]


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class RayBatch:
    """R rays with M sample depths each."""

    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3)
    depths: np.ndarray  # (R, M)

    def __post_init__(self) -> None:
        if self.depths.ndim != 2 or self.depths.shape[1] < 2:
            raise ContractError(f"Need (R, M) depths with M >= 2, got shape {self.depths.shape}")

    @property
    def size(self) -> int:
        return self.depths.shape[0]

    @property
    def samples(self) -> int:
        return self.depths.shape[1]

    def points(self) -> np.ndarray:
        return self.origins[:, None, :] + self.depths[..., None] * self.directions[:, None, :]

    def select(self, index: np.ndarray | slice) -> RayBatch:
        return RayBatch(self.origins[index], self.directions[index], self.depths[index])


@dataclass
class RenderResult:
    """Batched render; entries are Tensors when anything was traced."""

    depth: Array  # (R,)
    color: Array | None  # (R, 3)
    density: Array | None  # (R,)
    alphas: Array  # (R, M-1)
    weights: Array  # (R, M-1)
    accumulation: Array  # (R,)
    sample_density: Array | None  # (R, M), d_i at every sample
    raw_alphas: np.ndarray  # (R, M-1), before the max-clamp


@dataclass
class RenderOutput:
    """Single-ray render with plain float outputs."""

    Z: float
    C: np.ndarray
    D: float
    alphas: np.ndarray
    weights: np.ndarray
    accumulation: float
    depths: np.ndarray


@dataclass
class ViewRender:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    density: np.ndarray  # (H, W)
    accumulation: np.ndarray  # (H, W)


# ---------------------------------------------------------------------------
# Opacity, weights, compositing
# ---------------------------------------------------------------------------

def alpha_from_sdf(s_k: float, s_k1: float, beta: float) -> float:
    """Opacity of the interval between two consecutive SDF samples."""
    prev = logistic_delta(np.float64(s_k), beta)
    nxt = logistic_delta(np.float64(s_k1), beta)
    return float(max((prev - nxt) / max(prev, DELTA_EPS), 0.0))


def alphas_from_sdf(sdf: Array, beta: Array) -> tuple[Array, np.ndarray]:
    """Opacities along the last axis of ``sdf`` (..., M) -> (..., M-1).

    Returns:
        ``(alphas, raw)`` where ``raw`` holds the pre-clamp values.
    """
    delta = tape.sigmoid(tape.mul(sdf, beta))
    prev = delta[..., :-1]
    nxt = delta[..., 1:]
    raw = tape.div(tape.sub(prev, nxt), tape.clamp_min(prev, DELTA_EPS))
    alphas = tape.relu(raw)
    if is_traced(sdf, beta):
        return alphas, raw.data
    return alphas.data, raw.data


def transmittance(alphas: np.ndarray) -> np.ndarray:
    """``T_i = prod_{k<i} (1 - alpha_k)`` along the last axis, with T_0 = 1."""
    alphas = np.asarray(alphas)
    survive = np.cumprod(1.0 - alphas, axis=-1)
    ones = np.ones(alphas.shape[:-1] + (1,), dtype=survive.dtype)
    return np.concatenate([ones, survive[..., :-1]], axis=-1)


def occlusion_weights(alphas: np.ndarray) -> np.ndarray:
    alphas = np.asarray(alphas)
    return transmittance(alphas) * alphas


def occlusion_weights_op(alphas: Array) -> Tensor:
    """Tape-aware occlusion weights along the last axis.

    The adjoint avoids dividing by ``1 - alpha``:
    ``dL/dalpha_j = T_j * (g_j - U_j)`` with
    ``U_j = g_{j+1} alpha_{j+1} + (1 - alpha_{j+1}) U_{j+1}`` and ``U_last = 0``.
    """
    alphas = tape.as_tensor(alphas)
    a = alphas.data
    trans = transmittance(a)
    out = trans * a

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        tail = np.zeros_like(g)
        acc = np.zeros(g.shape[:-1], dtype=g.dtype)
        for j in range(a.shape[-1] - 2, -1, -1):
            acc = g[..., j + 1] * a[..., j + 1] + (1.0 - a[..., j + 1]) * acc
            tail[..., j] = acc
        return (trans * (g - tail),)

    return tape.make_op(out, (alphas,), backward, "occlusion_weights")


def composite(weights: Array, values: Array) -> Array:
    """Raw weighted sum over the sample axis.

    ``weights`` is (K,) or (R, K); ``values`` matches it, optionally with a
    trailing channel axis.
    """
    w_shape = np.shape(weights.data if isinstance(weights, Tensor) else weights)
    v_shape = np.shape(values.data if isinstance(values, Tensor) else values)
    if v_shape[: len(w_shape)] != w_shape:
        raise ContractError(f"Weights {w_shape} and values {v_shape} have different lengths")
    w = weights
    if len(v_shape) > len(w_shape):
        w = tape.reshape(weights, w_shape + (1,))
    out = tape.tsum(tape.mul(w, values), axis=len(w_shape) - 1)
    return out if is_traced(weights, values) else out.data


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _to_dtype(x: Array, dtype: np.dtype) -> Array:
    return x if isinstance(x, Tensor) else np.asarray(x, dtype=dtype)


def render_rays(
    volume: Array,
    bbox: BoundingBox,
    nets: FieldNets,
    rays: RayBatch,
    *,
    sdf_fn: SdfFn | None = None,
    with_color: bool = True,
    with_density: bool = True,
) -> RenderResult:
    """Render a batch of rays through a feature volume.

    Args:
        volume: Feature grid (X, Y, Z, C), array or Tensor.
        bbox: Box the grid spans.
        nets: Field networks (arrays or Tensors).
        rays: Ray origins, directions and sorted sample depths.
        sdf_fn: Optional analytic SDF replacing ``phi_sdf``.
        with_color: Evaluate the colour network.
        with_density: Evaluate the density network.
    """
    r, m = rays.depths.shape
    dtype = volume.dtype if isinstance(volume, (Tensor, np.ndarray)) else np.float64
    points = rays.points().reshape(-1, 3).astype(dtype)
    feats = trilinear_features(volume, bbox, points)

    sdf = phi_sdf(nets, points, feats) if sdf_fn is None else sdf_fn(points)
    traced = is_traced(volume, nets, sdf)
    sdf = tape.reshape(sdf, (r, m))
    alphas, raw = alphas_from_sdf(sdf, nets.beta)
    weights = occlusion_weights_op(alphas)
    t = _to_dtype(rays.depths[:, :-1], dtype)
    depth = tape.tsum(tape.mul(weights, t), axis=1)
    accumulation = tape.tsum(weights, axis=1)

    color = None
    if with_color:
        dirs = np.repeat(rays.directions, m, axis=0).astype(dtype)
        rgb = tape.reshape(phi_rgb(nets, points, feats, dirs), (r, m, 3))
        color = tape.tsum(tape.mul(tape.reshape(weights, (r, m - 1, 1)), rgb[:, :-1, :]), axis=1)

    density = sample_density = None
    if with_density:
        sample_density = tape.reshape(phi_density(nets, points, feats), (r, m))
        density = tape.tsum(tape.mul(weights, sample_density[:, :-1]), axis=1)

    def out(x: Array | None) -> Array | None:
        if x is None or traced:
            return x
        return x.data if isinstance(x, Tensor) else x

    return RenderResult(
        depth=out(depth),
        color=out(color),
        density=out(density),
        alphas=out(alphas),
        weights=out(weights),
        accumulation=out(accumulation),
        sample_density=out(sample_density),
        raw_alphas=raw,
    )


def render_ray(
    vol: FeatureVolume,
    nets: FieldNets,
    ray: Ray,
    samples: int,
    rng: np.random.Generator,
    *,
    sdf_fn: SdfFn | None = None,
) -> RenderOutput:
    """Render one ray, clipped to the volume's box; misses give all zeros."""
    if samples < 2:
        raise ContractError(f"Rendering needs at least 2 samples per ray, got {samples}")
    clipped = clip_ray(ray, vol.bbox)
    if clipped is None:
        zeros = np.zeros(samples - 1)
        return RenderOutput(0.0, np.zeros(3), 0.0, zeros, zeros.copy(), 0.0, np.zeros(samples))
    drawn = sample_ray_depths(clipped, samples, rng)
    batch = RayBatch(clipped.origin[None], clipped.direction[None], drawn.depths[None])
    res = render_rays(vol.values, vol.bbox, nets, batch, sdf_fn=sdf_fn)
    return RenderOutput(
        Z=float(res.depth[0]),
        C=np.asarray(res.color[0]),
        D=float(res.density[0]),
        alphas=np.asarray(res.alphas[0]),
        weights=np.asarray(res.weights[0]),
        accumulation=float(res.accumulation[0]),
        depths=drawn.depths,
    )


def render_view(
    volume: np.ndarray,
    bbox: BoundingBox,
    nets: FieldNets,
    camera: CameraModel,
    samples: int,
    rng: np.random.Generator,
    chunk: int = 4096,
) -> ViewRender:
    """Render every pixel of ``camera`` (through pixel centres)."""
    jj, ii = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    u, v = pixel_center(ii.ravel(), jj.ravel())
    origins, directions = rays_for_pixels(camera, u, v)
    t_near, t_far, hit = intersect_bbox(origins, directions, bbox)
    n_pix = u.size
    color = np.zeros((n_pix, 3))
    depth = np.zeros(n_pix)
    density = np.zeros(n_pix)
    accumulation = np.zeros(n_pix)

    idx = np.flatnonzero(hit)
    depths = stratified_depths(t_near[idx], t_far[idx], samples, rng)
    logger.debug(
        "Rendering {}x{} view: {} of {} rays hit the box", camera.width, camera.height, idx.size, n_pix
    )
    for start in range(0, idx.size, chunk):
        sel = idx[start : start + chunk]
        batch = RayBatch(origins[sel], directions[sel], depths[start : start + chunk])
        res = render_rays(volume, bbox, nets, batch)
        color[sel] = res.color
        depth[sel] = res.depth
        density[sel] = res.density
        accumulation[sel] = res.accumulation

    shape = (camera.height, camera.width)
    return ViewRender(
        color=color.reshape(shape + (3,)),
        depth=depth.reshape(shape),
        density=density.reshape(shape),
        accumulation=accumulation.reshape(shape),
    )
