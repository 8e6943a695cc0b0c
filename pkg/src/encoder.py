"""Per-view image encoder, projection-pooling lift and image density head.

Images are NHWC. Two 3x3 stride-2 convolutions (padding 1) reduce a view to a
quarter-resolution feature map; feature cell ``(i, j)`` covers full-resolution
pixels ``[4i, 4i+4) x [4j, 4j+4)``, so its centre is the full-resolution point
``(4i + 2, 4j + 2)``.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from loguru import logger

from src.errors import ContractError
from src.fields import activate
from src.geometry import CameraModel, in_frame, project_points
from src.grad import tape
from src.grad.store import ParameterStore
from src.grad.tape import Array, Tensor, scatter_add_rows, unwrap_unless_traced
from src.volume import BoundingBox, FeatureVolume, node_positions

STRIDE = 4
ENCODER_BLOCKS = ("conv1", "conv2", "head")


@dataclass
class ConvNetParams:
    conv1_weight: Array  # (mid, 3, 3, 3)
    conv1_bias: Array  # (mid,)
    conv2_weight: Array  # (C, 3, 3, mid)
    conv2_bias: Array  # (C,)
    head_weight: Array  # (1, C)
    head_bias: Array  # (1,)
    hidden_activation: str = "relu"

    @property
    def channels(self) -> int:
        return int(np.shape(_data(self.conv2_weight))[0])


@dataclass
class ImageFeatureMap:
    values: Array  # (H/4, W/4, C)
    camera: CameraModel | None = None


@dataclass
class LiftPlan:
    """Precomputed bilinear gather from V feature maps to volume nodes.

    Each row is one (node, view) pair where the node projects in front of the
    camera and inside its frame. Rows are ordered view-major.
    """

    node_index: np.ndarray  # (K,)
    pixel_index: np.ndarray  # (K, 4) flat index into (V, h, w)
    pixel_weight: np.ndarray  # (K, 4)
    counts: np.ndarray  # (X*Y*Z,) contributing views per node
    dims: tuple[int, int, int]
    map_shape: tuple[int, int, int]  # (V, h, w)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims))


def _data(x: Array) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d_stride2(x: Array, weight: Array, bias: Array) -> Tensor:
    """3x3 convolution, stride 2, zero padding 1, on (B, H, W, Cin) input."""
    x, weight, bias = tape.as_tensor(x), tape.as_tensor(weight), tape.as_tensor(bias)
    b, h, w, c_in = x.shape
    c_out = weight.shape[0]
    if weight.shape != (c_out, 3, 3, c_in):
        raise ContractError(f"Kernel shape {weight.shape} does not fit {c_in} input channels")
    if h % 2 or w % 2:
        raise ContractError(f"Input {h}x{w} must have even height and width")
    ho, wo = h // 2, w // 2

    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = [padded[:, ky : ky + 2 * ho : 2, kx : kx + 2 * wo : 2, :] for ky in range(3) for kx in range(3)]
    cols = np.stack(taps, axis=3).reshape(b * ho * wo, 9 * c_in)
    kernel = weight.data.reshape(c_out, 9 * c_in)
    out = (cols @ kernel.T + bias.data).reshape(b, ho, wo, c_out)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gm = g.reshape(-1, c_out)
        d_weight = (gm.T @ cols).reshape(weight.shape)
        d_cols = (gm @ kernel).reshape(b, ho, wo, 3, 3, c_in)
        d_padded = np.zeros(padded.shape, dtype=g.dtype)
        for ky in range(3):
            for kx in range(3):
                d_padded[:, ky : ky + 2 * ho : 2, kx : kx + 2 * wo : 2, :] += d_cols[:, :, :, ky, kx, :]
        return d_padded[:, 1:-1, 1:-1, :], d_weight, gm.sum(axis=0)

    return tape.make_op(out, (x, weight, bias), backward, "conv2d")


def encode_views(images: np.ndarray, params: ConvNetParams) -> Array:
    """Feature maps for a stack of views (V, H, W, 3) -> (V, H/4, W/4, C)."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ContractError(f"Expected (V, H, W, 3) images, got shape {images.shape}")
    if images.shape[1] % STRIDE or images.shape[2] % STRIDE:
        raise ContractError(f"Image size {images.shape[1]}x{images.shape[2]} must be divisible by {STRIDE}")
    dtype = _data(params.conv1_weight).dtype
    h = conv2d_stride2(images.astype(dtype, copy=False), params.conv1_weight, params.conv1_bias)
    h = activate(h, params.hidden_activation)
    out = conv2d_stride2(h, params.conv2_weight, params.conv2_bias)
    return unwrap_unless_traced(out, params)


def extract_features(image: np.ndarray, params: ConvNetParams, camera: CameraModel | None = None) -> ImageFeatureMap:
    """Quarter-resolution feature map of one H x W x 3 image in [0, 1]."""
    values = encode_views(np.asarray(image)[None], params)
    return ImageFeatureMap(values=values[0], camera=camera)


def predict_density_map(features: Array | ImageFeatureMap, params: ConvNetParams) -> Array:
    """1x1 convolution + softplus over (..., h, w, C) features -> (..., h, w)."""
    if isinstance(features, ImageFeatureMap):
        features = features.values
    shape = np.shape(_data(features))
    flat = tape.reshape(features, (-1, shape[-1]))
    dens = tape.softplus(tape.linear(flat, params.head_weight, params.head_bias))
    return unwrap_unless_traced(tape.reshape(dens, shape[:-1]), features, params)


# ---------------------------------------------------------------------------
# Lifting
# ---------------------------------------------------------------------------

def _bilinear_taps(x: np.ndarray, y: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat (h, w) indices and weights of the 4 taps around continuous cell
    coordinates, clamped to the map."""

    def axis(coord: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coord = np.clip(coord, 0.0, n - 1)
        lo = np.minimum(np.floor(coord).astype(np.int64), max(n - 2, 0))
        frac = coord - lo
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, frac

    x0, x1, fx = axis(x, w)
    y0, y1, fy = axis(y, h)
    index = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
    weight = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=-1)
    return index, weight


def feature_coords(u: np.ndarray, v: np.ndarray, stride: int = STRIDE) -> tuple[np.ndarray, np.ndarray]:
    """Full-resolution image point -> continuous feature-cell coordinates."""
    return u / stride - 0.5, v / stride - 0.5


def build_lift_plan(
    cameras: Sequence[CameraModel],
    map_hw: tuple[int, int],
    bbox: BoundingBox,
    dims: tuple[int, int, int],
    stride: int = STRIDE,
) -> LiftPlan:
    h, w = map_hw
    nodes = node_positions(bbox, dims).reshape(-1, 3)
    node_rows, pix_rows, weight_rows = [], [], []
    counts = np.zeros(len(nodes), dtype=np.int64)
    for view, camera in enumerate(cameras):
        u, v, z = project_points(camera, nodes)
        visible = np.flatnonzero(in_frame(camera, u, v) & (z > 0))
        x, y = feature_coords(u[visible], v[visible], stride)
        index, weight = _bilinear_taps(x, y, h, w)
        node_rows.append(visible)
        pix_rows.append(index + view * h * w)
        weight_rows.append(weight)
        counts[visible] += 1
    plan = LiftPlan(
        node_index=np.concatenate(node_rows) if node_rows else np.zeros(0, dtype=np.int64),
        pixel_index=np.concatenate(pix_rows) if pix_rows else np.zeros((0, 4), dtype=np.int64),
        pixel_weight=np.concatenate(weight_rows) if weight_rows else np.zeros((0, 4)),
        counts=counts,
        dims=tuple(int(d) for d in dims),
        map_shape=(len(cameras), h, w),
    )
    logger.debug(
        "Lift plan: {} of {} nodes seen by at least one of {} views",
        int((counts > 0).sum()),
        len(nodes),
        len(cameras),
    )
    return plan


def apply_lift(plan: LiftPlan, maps: Array) -> Array:
    """Mean of bilinear samples over contributing views, (V, h, w, C) -> (X, Y, Z, C)."""
    maps_t = tape.as_tensor(maps)
    if maps_t.shape[:3] != plan.map_shape:
        raise ContractError(f"Feature maps {maps_t.shape[:3]} do not match lift plan {plan.map_shape}")
    channels = maps_t.shape[3]
    flat = maps_t.data.reshape(-1, channels)
    weight = plan.pixel_weight.astype(maps_t.dtype, copy=False)
    samples = np.einsum("kt,ktc->kc", weight, flat[plan.pixel_index])
    scale = (1.0 / np.maximum(plan.counts, 1)).astype(maps_t.dtype)[:, None]
    summed = scatter_add_rows(plan.n_nodes, plan.node_index, samples)
    out = (summed * scale).reshape(*plan.dims, channels)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        g_rows = (g.reshape(-1, channels) * scale)[plan.node_index]
        contrib = weight.T[:, :, None] * g_rows[None, :, :]
        full = scatter_add_rows(flat.shape[0], plan.pixel_index.T.ravel(), contrib.reshape(-1, channels))
        return (full.reshape(maps_t.shape),)

    return unwrap_unless_traced(tape.make_op(out, (maps_t,), backward, "lift"), maps)


def lift_to_volume(
    feature_maps: Sequence[ImageFeatureMap],
    cameras: Sequence[CameraModel],
    bbox: BoundingBox,
    dims: tuple[int, int, int],
    channels: int,
) -> FeatureVolume:
    if len(feature_maps) != len(cameras):
        raise ContractError(f"Got {len(feature_maps)} feature maps for {len(cameras)} cameras")
    if not feature_maps:
        return FeatureVolume(bbox, np.zeros((*dims, channels)))
    maps = np.stack([_data(fm.values) for fm in feature_maps])
    if maps.shape[-1] != channels:
        raise ContractError(f"Feature maps carry {maps.shape[-1]} channels, expected {channels}")
    plan = build_lift_plan(cameras, maps.shape[1:3], bbox, dims)
    return FeatureVolume(bbox, apply_lift(plan, maps))


def sample_maps(maps: np.ndarray, views: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup of (V, h, w) maps at full-resolution image points."""
    n_views, h, w = maps.shape
    x, y = feature_coords(np.asarray(u), np.asarray(v))
    index, weight = _bilinear_taps(x, y, h, w)
    flat = maps.reshape(n_views, h * w)
    return np.sum(flat[np.asarray(views)[:, None], index] * weight, axis=-1)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_conv_params(
    channels: int,
    rng: np.random.Generator,
    mid_channels: int = 8,
    hidden_activation: str = "relu",
    head_bias: float = -2.0,
    dtype: type = np.float64,
) -> ConvNetParams:
    """He-style conv kernels, a small density head and a negative head bias so
    initial maps start near zero."""

    def kernel(c_out: int, c_in: int) -> np.ndarray:
        return (rng.standard_normal((c_out, 3, 3, c_in)) * np.sqrt(2.0 / (9 * c_in))).astype(dtype)

    return ConvNetParams(
        conv1_weight=kernel(mid_channels, 3),
        conv1_bias=np.zeros(mid_channels, dtype=dtype),
        conv2_weight=kernel(channels, mid_channels),
        conv2_bias=np.zeros(channels, dtype=dtype),
        head_weight=(rng.standard_normal((1, channels)) * 1e-2).astype(dtype),
        head_bias=np.full(1, head_bias, dtype=dtype),
        hidden_activation=hidden_activation,
    )


def register_encoder(store: ParameterStore, params: ConvNetParams) -> None:
    for block in ENCODER_BLOCKS:
        store.add(f"encoder.{block}.weight", _data(getattr(params, f"{block}_weight")))
        store.add(f"encoder.{block}.bias", _data(getattr(params, f"{block}_bias")))


def conv_params_from(params: Mapping[str, Array], hidden_activation: str = "relu") -> ConvNetParams:
    return ConvNetParams(
        **{
            f"{block}_{kind}": params[f"encoder.{block}.{kind}"]
            for block in ENCODER_BLOCKS
            for kind in ("weight", "bias")
        },
        hidden_activation=hidden_activation,
    )
