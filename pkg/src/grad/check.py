"""Reverse-mode gradients of scalar losses, and finite-difference references."""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence

import numpy as np
from pydantic import BaseModel

from src.errors import ContractError, NonFiniteLoss
from src.grad.store import ParameterStore
from src.grad.tape import Array, Tensor, as_tensor, gradients

LossFn = Callable[[Mapping[str, Array]], Array]

# Central-difference stencils: offsets and weights, divided by h.
_STENCILS: dict[int, tuple[tuple[int, ...], tuple[float, ...]]] = {
    2: ((-1, 1), (-0.5, 0.5)),
    4: ((-2, -1, 1, 2), (1 / 12, -8 / 12, 8 / 12, -1 / 12)),
    6: ((-3, -2, -1, 1, 2, 3), (-1 / 60, 9 / 60, -45 / 60, 45 / 60, -9 / 60, 1 / 60)),
}


class BlockReport(BaseModel):
    """Gradient agreement for one parameter block."""

    name: str
    size: int
    checked: int
    max_rel_error: float
    argmax: int
    passed: bool


class GradReport(BaseModel):
    """Outcome of a gradient check across every parameter block."""

    tolerance: float
    passed: bool
    max_rel_error: float
    seed: int
    resamples: int = 0
    blocks: list[BlockReport]


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------

def _scalar(value: Array) -> Tensor:
    out = as_tensor(value)
    if out.size != 1:
        raise ContractError(f"Loss must be a scalar, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteLoss("Loss evaluated to a non-finite value")
    return out


def value_and_grad(loss_fn: LossFn, params: ParameterStore) -> tuple[float, np.ndarray]:
    """Loss value and its gradient as a flat vector in ``params`` order."""
    leaves = params.as_leaves()
    out = _scalar(loss_fn(leaves))
    grads = gradients(out, [leaves[name] for name in params.names])
    flat = np.concatenate([g.ravel() for g in grads]) if grads else np.zeros(0)
    return float(out.data), flat


def grad(loss_fn: LossFn, params: ParameterStore) -> np.ndarray:
    return value_and_grad(loss_fn, params)[1]


def evaluate(loss_fn: LossFn, params: Mapping[str, np.ndarray]) -> float:
    """Forward-only loss value on plain arrays."""
    return float(_scalar(loss_fn(dict(params))).data)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference_grad(
    loss_fn: LossFn,
    params: ParameterStore,
    h: float = 1e-4,
    *,
    coords: Sequence[int] | None = None,
    order: int = 2,
) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    Args:
        loss_fn: Maps a name->array mapping to a scalar.
        params: Evaluation point.
        h: Step size.
        coords: Flat coordinates to perturb. Others are left at 0 in the
            result. Defaults to all coordinates.
        order: Accuracy order of the stencil (2, 4 or 6).

    Returns:
        Flat vector shaped like ``params.flatten()``.
    """
    if order not in _STENCILS:
        raise ContractError(f"Unsupported stencil order {order}; use one of {sorted(_STENCILS)}")
    if h <= 0:
        raise ContractError(f"Step size must be positive, got {h}")
    offsets, weights = _STENCILS[order]

    work = {name: arr.copy() for name, arr in params.items()}
    layout = params.blocks()
    result = np.zeros(params.size, dtype=np.float64)
    selected = range(params.size) if coords is None else coords

    for flat_index in selected:
        name, local = _locate(layout, int(flat_index))
        block = work[name].reshape(-1)
        original = block[local]
        total = 0.0
        for k, w in zip(offsets, weights):
            block[local] = original + k * h
            total += w * evaluate(loss_fn, work)
        block[local] = original
        result[flat_index] = total / h
    return result


def _locate(layout: list[tuple[str, slice]], flat_index: int) -> tuple[str, int]:
    for name, sl in layout:
        if sl.start <= flat_index < sl.stop:
            return name, flat_index - sl.start
    raise ContractError(f"Flat index {flat_index} outside parameter vector")


def directional_check(
    loss_fn: LossFn,
    params: ParameterStore,
    direction: np.ndarray,
    h: float = 1e-4,
) -> tuple[float, float]:
    """Compare ``grad . u`` with a central difference along unit ``u``.

    Returns:
        ``(analytic, numeric)`` directional derivatives.
    """
    u = np.asarray(direction, dtype=np.float64).ravel()
    if u.shape != (params.size,):
        raise ContractError(f"Direction has {u.size} entries, expected {params.size}")
    norm = np.linalg.norm(u)
    if norm == 0:
        raise ContractError("Direction must be non-zero")
    u = u / norm

    analytic = float(grad(loss_fn, params) @ u)
    x0 = params.flatten().astype(np.float64)
    plus = evaluate(loss_fn, params.unflatten(x0 + h * u).as_dict())
    minus = evaluate(loss_fn, params.unflatten(x0 - h * u).as_dict())
    return analytic, (plus - minus) / (2 * h)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
