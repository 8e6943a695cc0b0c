"""Ground truth for synthetic scenes: oracle renders, density maps and volumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.encoder import STRIDE, feature_coords
from src.errors import ContractError
from src.geometry import (
    CameraModel,
    in_frame,
    intersect_bbox,
    pixel_center,
    project_points,
    rays_for_pixels,
    stratified_depths,
)
from src.synth.scene import SceneSpec, analytic_color, analytic_density, analytic_sdf
from src.volume import DensityVolume, node_positions


def sample_weights(sdf: np.ndarray, beta: float) -> np.ndarray:
    """Compositing weights of the M-1 sample intervals along each ray.

    Shares no code with ``src.renderer``.
    """
    delta = np.exp(-np.logaddexp(0.0, -beta * sdf))
    alpha = np.maximum((delta[..., :-1] - delta[..., 1:]) / np.maximum(delta[..., :-1], 1e-9), 0.0)
    survive = np.cumprod(1.0 - alpha, axis=-1)
    before = np.concatenate([np.ones_like(survive[..., :1]), survive[..., :-1]], axis=-1)
    return before * alpha


@dataclass
class OracleView:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), composited depth
    accumulation: np.ndarray  # (H, W), sum of weights


def oracle_render_rays(
    scene: SceneSpec,
    origins: np.ndarray,
    directions: np.ndarray,
    samples: int,
    beta: float,
    rng: np.random.Generator,
    chunk: int = 256,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Composite analytic fields along rays clipped to the scene box.

    Returns:
        ``(color (R, 3), depth (R,), accumulation (R,))``.
    """
    n = origins.shape[0]
    color = np.zeros((n, 3))
    depth = np.zeros(n)
    accumulation = np.zeros(n)
    t_near, t_far, hit = intersect_bbox(origins, directions, scene.bbox)
    idx = np.flatnonzero(hit)
    depths = stratified_depths(t_near[idx], t_far[idx], samples, rng)
    for start in range(0, idx.size, chunk):
        sel = idx[start : start + chunk]
        t = depths[start : start + chunk]
        points = origins[sel, None, :] + t[..., None] * directions[sel, None, :]
        w = sample_weights(analytic_sdf(scene, points), beta)
        depth[sel] = np.sum(w * t[:, :-1], axis=1)
        color[sel] = np.sum(w[..., None] * analytic_color(scene, points[:, :-1]), axis=1)
        accumulation[sel] = w.sum(axis=1)
    return color, depth, accumulation


def oracle_render_view(
    scene: SceneSpec,
    camera: CameraModel,
    rng: np.random.Generator,
    samples: int = 512,
    beta: float = 200.0,
) -> OracleView:
    """High-sample render of the analytic scene through every pixel centre."""
    if samples < 2:
        raise ContractError(f"Oracle rendering needs at least 2 samples, got {samples}")
    jj, ii = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    u, v = pixel_center(ii.ravel(), jj.ravel())
    origins, directions = rays_for_pixels(camera, u, v)
    color, depth, accumulation = oracle_render_rays(scene, origins, directions, samples, beta, rng)
    shape = (camera.height, camera.width)
    return OracleView(
        image=np.clip(color, 0.0, 1.0).reshape(shape + (3,)),
        depth=depth.reshape(shape),
        accumulation=accumulation.reshape(shape),
    )


def gt_density_map_2d(
    scene: SceneSpec, camera: CameraModel, sigma_px: float = 2.0, stride: int = STRIDE
) -> np.ndarray:
    """Per-view density map at feature resolution.

    Each head in front of the camera and inside the frame contributes a
    discrete Gaussian (``sigma_px`` in feature cells) renormalized to unit sum
    over the map.
    """
    if sigma_px <= 0:
        raise ContractError(f"sigma_px must be positive, got {sigma_px}")
    h, w = camera.height // stride, camera.width // stride
    out = np.zeros((h, w))
    if not scene.entities:
        return out
    heads = np.stack([e.head for e in scene.entities])
    u, v, z = project_points(camera, heads)
    visible = in_frame(camera, u, v) & (z > 0)
    xs, ys = feature_coords(u[visible], v[visible], stride)
    cols = np.arange(w)
    rows = np.arange(h)
    for x, y in zip(xs, ys):
        gx = np.exp(-((cols - x) ** 2) / (2.0 * sigma_px**2))
        gy = np.exp(-((rows - y) ** 2) / (2.0 * sigma_px**2))
        splat = np.outer(gy, gx)
        out += splat / splat.sum()
    return out


def gt_density_volume(scene: SceneSpec, dims: tuple[int, int, int]) -> DensityVolume:
    if min(dims) < 2:
        raise ContractError(f"Density volume needs >= 2 nodes per axis, got {dims}")
    nodes = node_positions(scene.bbox, dims)
    return DensityVolume(scene.bbox, analytic_density(scene, nodes))
