"""Bias-corrected Adam over named parameter blocks."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from src.errors import ContractError


@dataclass
class AdamState:
    """First and second moment estimates per block and the last step index."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def copy(self) -> AdamState:
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            t=self.t,
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int | None = None,
    lr_scale: Mapping[str, float] | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update; inputs are left untouched.

    Args:
        params: Current parameter blocks.
        grads: Gradient per block, same shapes.
        state: Moments from the previous step.
        lr: Base step size.
        beta1: First-moment decay.
        beta2: Second-moment decay.
        eps: Denominator guard.
        t: Step index (>= 1). Defaults to ``state.t + 1``.
        lr_scale: Optional per-block multipliers on ``lr``.

    Returns:
        ``(new_params, new_state)``.
    """
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ContractError(f"Adam step index must be >= 1, got {t}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t

    new_params: dict[str, np.ndarray] = {}
    new_state = AdamState(t=t)
    for name, value in params.items():
        g = np.asarray(grads[name])
        if g.shape != value.shape:
            raise ContractError(f"Gradient for {name} has shape {g.shape}, expected {value.shape}")
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        step = lr * (1.0 if lr_scale is None else lr_scale.get(name, 1.0))
        update = step * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = (value - update).astype(value.dtype, copy=False)
        new_state.m[name] = m.astype(value.dtype, copy=False)
        new_state.v[name] = v.astype(value.dtype, copy=False)
    return new_params, new_state
