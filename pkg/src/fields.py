"""Field networks decoding volume features into SDF, colour and crowd density.

Every network is a small MLP applied to ``[p, encode(p), f]`` (and the view
direction for colour). Parameters are plain arrays or tape Tensors, so the
same forward serves inference, training and gradient checks.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from src.errors import ContractError
from src.grad import tape
from src.grad.store import ParameterStore
from src.grad.tape import Array, Tensor, unwrap_unless_traced

ACTIVATIONS = ("linear", "relu", "softplus", "sharp_softplus", "sigmoid")
SHARP_SOFTPLUS = 100.0
NET_NAMES = ("sdf", "rgb", "density")


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class Layer:
    weights: Array  # (out, in)
    biases: Array  # (out,)


@dataclass
class MlpParams:
    layers: list[Layer]
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self) -> None:
        for tag in (self.hidden_activation, self.output_activation):
            if tag not in ACTIVATIONS:
                raise ContractError(f"Unknown activation {tag!r}; expected one of {ACTIVATIONS}")
        if not self.layers:
            raise ContractError("An MLP needs at least one layer")
        for i, layer in enumerate(self.layers):
            w_shape, b_shape = np.shape(_data(layer.weights)), np.shape(_data(layer.biases))
            if len(w_shape) != 2 or b_shape != (w_shape[0],):
                raise ContractError(f"Layer {i}: weights {w_shape} and biases {b_shape} do not match")
            if i and w_shape[1] != np.shape(_data(self.layers[i - 1].weights))[0]:
                raise ContractError(f"Layer {i} input width does not chain with layer {i - 1}")

    @property
    def in_features(self) -> int:
        return int(np.shape(_data(self.layers[0].weights))[1])

    @property
    def out_features(self) -> int:
        return int(np.shape(_data(self.layers[-1].weights))[0])


@dataclass(frozen=True)
class FieldArchitecture:
    """Shape information needed to rebuild FieldNets from named arrays."""

    channels: int
    hidden_width: int = 64
    hidden_layers: int = 2
    sdf_hidden_activation: str = "sharp_softplus"
    hidden_activation: str = "relu"
    encoding_freqs: int = 0

    @property
    def point_features(self) -> int:
        return 3 + 6 * self.encoding_freqs

    def input_size(self, net: str) -> int:
        base = self.point_features + self.channels
        return base + 3 if net == "rgb" else base

    def output_size(self, net: str) -> int:
        return 3 if net == "rgb" else 1

    def activations(self, net: str) -> tuple[str, str]:
        return {
            "sdf": (self.sdf_hidden_activation, "linear"),
            "rgb": (self.hidden_activation, "sigmoid"),
            "density": (self.hidden_activation, "softplus"),
        }[net]

    def layer_sizes(self, net: str) -> list[int]:
        return [self.input_size(net)] + [self.hidden_width] * self.hidden_layers + [self.output_size(net)]


@dataclass
class FieldNets:
    sdf: MlpParams
    rgb: MlpParams
    density: MlpParams
    log_beta: Array
    encoding_freqs: int = field(default=0)

    @property
    def beta(self) -> Array:
        return tape.exp(self.log_beta) if isinstance(self.log_beta, Tensor) else np.exp(self.log_beta)


def _data(x: Array) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def activate(x: Array, tag: str) -> Array:
    if tag == "linear":
        return x
    if tag == "relu":
        return tape.relu(x)
    if tag == "softplus":
        return tape.softplus(x)
    if tag == "sharp_softplus":
        return tape.softplus(x, SHARP_SOFTPLUS)
    if tag == "sigmoid":
        return tape.sigmoid(x)
    raise ContractError(f"Unknown activation {tag!r}")


def mlp_forward(params: MlpParams, x: Array) -> Array:
    """Apply the MLP to one input vector or to a batch (N, in)."""
    single = np.ndim(_data(x)) == 1
    h = tape.reshape(x, (1, -1)) if single else tape.as_tensor(x)
    if h.shape[1] != params.in_features:
        raise ContractError(f"MLP expects {params.in_features} inputs, got {h.shape[1]}")
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        h = tape.linear(h, layer.weights, layer.biases)
        h = activate(h, params.hidden_activation if i < last else params.output_activation)
    if single:
        h = tape.reshape(h, (params.out_features,))
    return unwrap_unless_traced(h, x, params)


def positional_encoding(points: np.ndarray, freqs: int) -> np.ndarray:
    """``[sin(2^k pi p), cos(2^k pi p)]`` for k < freqs, per coordinate."""
    points = np.asarray(points)
    if freqs == 0:
        return np.zeros(points.shape[:-1] + (0,), dtype=points.dtype)
    scales = (2.0 ** np.arange(freqs)) * np.pi
    angles = points[..., None, :] * scales[:, None]
    enc = np.concatenate([np.sin(angles), np.cos(angles)], axis=-2)
    return enc.reshape(points.shape[:-1] + (6 * freqs,)).astype(points.dtype, copy=False)


def _inputs(nets: FieldNets, p: np.ndarray, f: Array, extra: np.ndarray | None = None) -> Array:
    p = np.asarray(p)
    parts: list[Array] = [p, positional_encoding(p, nets.encoding_freqs), f]
    if extra is not None:
        parts.append(np.asarray(extra))
    if isinstance(f, Tensor):
        dtype = f.dtype
        return tape.concat([x if isinstance(x, Tensor) else np.asarray(x, dtype=dtype) for x in parts], axis=-1)
    return np.concatenate([np.asarray(x) for x in parts], axis=-1)


def _scalar_output(out: Array, single: bool) -> Array:
    if isinstance(out, Tensor):
        return tape.reshape(out, ()) if single else tape.reshape(out, (out.shape[0],))
    return out.reshape(()) if single else out.reshape(-1)


def phi_sdf(nets: FieldNets, p: np.ndarray, f: Array) -> Array:
    """Signed distance; negative inside surfaces. Batched over leading axis."""
    single = np.ndim(p) == 1
    out = mlp_forward(nets.sdf, _inputs(nets, p, f))
    return _scalar_output(out, single)


def phi_rgb(nets: FieldNets, p: np.ndarray, f: Array, d: np.ndarray) -> Array:
    """Colour in [0, 1]^3 seen from unit view direction ``d``."""
    d = np.asarray(d)
    if d.ndim == 1 and np.ndim(p) == 2:
        d = np.broadcast_to(d, np.shape(p))
    if not np.allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-6):
        raise ContractError("View direction must be unit length")
    return mlp_forward(nets.rgb, _inputs(nets, p, f, d))


def phi_density(nets: FieldNets, p: np.ndarray, f: Array) -> Array:
    """Persons per unit volume, always >= 0."""
    single = np.ndim(p) == 1
    out = mlp_forward(nets.density, _inputs(nets, p, f))
    return _scalar_output(out, single)


def logistic_delta(s: Array, beta: Array) -> Array:
    """delta(s) = 1 / (1 + exp(-s * beta))."""
    if np.any(_data(beta) <= 0):
        raise ContractError(f"beta must be positive, got {_data(beta)}")
    return unwrap_unless_traced(tape.sigmoid(tape.mul(s, beta)), s, beta)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_mlp(
    sizes: list[int],
    hidden_activation: str,
    output_activation: str,
    rng: np.random.Generator,
    scale: float | None = 1e-2,
    dtype: type = np.float64,
) -> MlpParams:
    """Gaussian weights with zero biases.

    ``scale=None`` uses ``1/sqrt(fan_in)`` per layer.
    """
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = 1.0 / np.sqrt(fan_in) if scale is None else scale
        layers.append(
            Layer(
                weights=(rng.standard_normal((fan_out, fan_in)) * std).astype(dtype),
                biases=np.zeros(fan_out, dtype=dtype),
            )
        )
    return MlpParams(layers, hidden_activation, output_activation)


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` unit vectors spread evenly over the sphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def geometric_sdf_init(
    arch: FieldArchitecture,
    center: np.ndarray,
    radius: float,
    dtype: type = np.float64,
) -> MlpParams:
    """SDF MLP whose zero level set starts as a sphere.

    Each first-layer unit measures ``u_j . (p - center)`` along an evenly
    spread unit direction ``u_j``; the sharp softplus turns that into a
    one-sided ramp, hidden layers pass it through unchanged and the output
    averages the ramps. The mean of ``max(u . x, 0)`` over the sphere is
    ``|x| / 4``, so the scaled sum approximates ``|p - center|``. Hidden values
    stay at coordinate scale.
    """
    if arch.sdf_hidden_activation != "sharp_softplus" or arch.hidden_layers < 1:
        raise ContractError("Geometric SDF init needs at least one sharp_softplus hidden layer")
    width = arch.hidden_width
    center = np.asarray(center, dtype=np.float64)
    dirs = fibonacci_directions(width)

    first_w = np.zeros((width, arch.input_size("sdf")))
    first_w[:, :3] = dirs
    first_b = -dirs @ center
    layers = [Layer(first_w.astype(dtype), first_b.astype(dtype))]
    for _ in range(arch.hidden_layers - 1):
        layers.append(Layer(np.eye(width, dtype=dtype), np.zeros(width, dtype=dtype)))

    # inactive units settle at sharp_softplus^(L-1)(0) after the identity layers
    floor = 0.0
    for _ in range(arch.hidden_layers - 1):
        floor = float(np.logaddexp(0.0, SHARP_SOFTPLUS * floor) / SHARP_SOFTPLUS)
    out_w = np.full((1, width), 4.0 / width)
    out_b = np.array([-radius - 2.0 * floor])
    layers.append(Layer(out_w.astype(dtype), out_b.astype(dtype)))
    return MlpParams(layers, "sharp_softplus", "linear")


def init_field_nets(
    arch: FieldArchitecture,
    rng: np.random.Generator,
    *,
    sdf_init: str = "geometric",
    center: np.ndarray | None = None,
    radius: float = 0.5,
    init_beta: float = 10.0,
    init_scale: float | None = 1e-2,
    dtype: type = np.float64,
) -> FieldNets:
    if sdf_init == "geometric":
        sdf = geometric_sdf_init(arch, np.zeros(3) if center is None else center, radius, dtype=dtype)
    elif sdf_init == "random":
        sdf = init_mlp(arch.layer_sizes("sdf"), *arch.activations("sdf"), rng, scale=None, dtype=dtype)
    elif sdf_init == "zero":
        sdf = init_mlp(arch.layer_sizes("sdf"), *arch.activations("sdf"), rng, scale=0.0, dtype=dtype)
    else:
        raise ContractError(f"Unknown SDF init {sdf_init!r}")
    rgb = init_mlp(arch.layer_sizes("rgb"), *arch.activations("rgb"), rng, scale=init_scale, dtype=dtype)
    density = init_mlp(
        arch.layer_sizes("density"), *arch.activations("density"), rng, scale=init_scale, dtype=dtype
    )
    return FieldNets(sdf, rgb, density, np.array(np.log(init_beta), dtype=dtype), arch.encoding_freqs)


# ---------------------------------------------------------------------------
# Named-array conversion
# ---------------------------------------------------------------------------

def register_field_nets(store: ParameterStore, nets: FieldNets) -> None:
    """Add ``{net}.{i}.weight`` / ``{net}.{i}.bias`` blocks and ``log_beta``."""
    for net in NET_NAMES:
        for i, layer in enumerate(getattr(nets, net).layers):
            store.add(f"{net}.{i}.weight", _data(layer.weights))
            store.add(f"{net}.{i}.bias", _data(layer.biases))
    store.add("log_beta", _data(nets.log_beta))


def field_nets_from(params: Mapping[str, Array], arch: FieldArchitecture) -> FieldNets:
    """Rebuild FieldNets from named arrays or Tensors (shared, not copied)."""
    nets = {}
    for net in NET_NAMES:
        n_layers = arch.hidden_layers + 1
        layers = [Layer(params[f"{net}.{i}.weight"], params[f"{net}.{i}.bias"]) for i in range(n_layers)]
        hidden, output = arch.activations(net)
        nets[net] = MlpParams(layers, hidden, output)
    return FieldNets(nets["sdf"], nets["rgb"], nets["density"], params["log_beta"], arch.encoding_freqs)
