"""Reverse-mode differentiation, parameter storage and gradient checks."""

from src.grad.check import (
    BlockReport,
    GradReport,
    directional_check,
    finite_difference_grad,
    grad,
    relative_error,
    value_and_grad,
)
from src.grad.store import ParameterStore
from src.grad.tape import Array, Tensor, as_tensor, backward, gradients, make_op

__all__ = [
    "Array",
    "BlockReport",
    "GradReport",
    "ParameterStore",
    "Tensor",
    "as_tensor",
    "backward",
    "directional_check",
    "finite_difference_grad",
    "grad",
    "gradients",
    "make_op",
    "relative_error",
    "value_and_grad",
]
