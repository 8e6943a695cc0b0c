"""Tape-based reverse-mode differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and, when any of its inputs requires a
gradient, remembers its parents and a backward closure. ``backward`` walks the
recorded graph in reverse topological order and returns one gradient per
node. Only the operations the rendering pipeline needs are provided; custom
operations with hand-written adjoints plug in through ``make_op``.

Usage:
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    (gx,) = gradients(y, [x])      # -> 6.0
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from dataclasses import fields, is_dataclass
from typing import Any, Union

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An ndarray plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")
    # ndarray binary operators defer to our reflected methods
    __array_ufunc__ = None

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        parents: tuple[Tensor, ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
    ) -> None:
        arr = np.asarray(data)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(op={self.op!r}, shape={self.shape}{flag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        return mean(self, axis=axis)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


Array = Union[np.ndarray, Tensor]


def as_tensor(x: Any) -> Tensor:
    """Wrap a non-Tensor value as a constant Tensor."""
    return x if isinstance(x, Tensor) else Tensor(x)


def is_traced(*objs: Any) -> bool:
    """True when any argument (searched through lists, tuples, dicts and
    dataclasses) is a Tensor."""
    for obj in objs:
        if isinstance(obj, Tensor):
            return True
        if isinstance(obj, (list, tuple)):
            if is_traced(*obj):
                return True
        elif isinstance(obj, dict):
            if is_traced(*obj.values()):
                return True
        elif is_dataclass(obj) and not isinstance(obj, type):
            if is_traced(*(getattr(obj, f.name) for f in fields(obj))):
                return True
    return False


def unwrap_unless_traced(result: Tensor, *inputs: Any) -> Array:
    """Return ``result`` as a Tensor when inputs were Tensors, else its array."""
    return result if is_traced(*inputs) else result.data


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    """Create the output node of an operation.

    The backward closure receives the upstream gradient (shaped like ``data``)
    and returns one gradient (or None) per parent. Nothing is recorded when
    no parent requires a gradient.
    """
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
        "div",
    )


def neg(a: Any) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Any, exponent: float) -> Tensor:
    a = as_tensor(a)
    return make_op(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
        "pow",
    )


def square(a: Any) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Any) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ---------------------------------------------------------------------------
# Activations and clamps
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Any) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Any, sharpness: float = 1.0) -> Tensor:
    """``log(1 + exp(k x)) / k``; large ``k`` approaches relu."""
    a = as_tensor(a)
    kx = sharpness * a.data
    out = (np.logaddexp(0.0, kx) / sharpness).astype(a.dtype, copy=False)
    return make_op(out, (a,), lambda g: (g * _sigmoid(kx),), "softplus")


def relu(a: Any) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


def clamp_min(a: Any, lower: float) -> Tensor:
    """max(x, lower); gradient passes only where x > lower."""
    a = as_tensor(a)
    mask = a.data > lower
    out = np.where(mask, a.data, lower).astype(a.dtype, copy=False)
    return make_op(out, (a,), lambda g: (g * mask,), "clamp_min")


def stop_gradient(a: Any) -> Tensor:
    return Tensor(as_tensor(a).data, op="stop_gradient")


# ---------------------------------------------------------------------------
# Linear algebra, reductions and shape
# ---------------------------------------------------------------------------

def matmul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return make_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Any, weight: Any, bias: Any) -> Tensor:
    """Affine layer ``x @ weight.T + bias`` with weight stored out×in."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    return make_op(
        x.data @ weight.data.T + bias.data,
        (x, weight, bias),
        lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)),
        "linear",
    )


def tsum(a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Any, axis: int | tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis) / float(count)


def reshape(a: Any, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def _is_basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def getitem(a: Any, index: Any) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            # basic indexing never repeats an element
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Any], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return list(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def scatter_add_rows(n_rows: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` (K, C) into an (n_rows, C) array by ``index``.

    Accumulation runs in index order of ``values`` for every channel, so the
    result is bitwise reproducible.
    """
    out = np.empty((n_rows, values.shape[1]), dtype=values.dtype)
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(index, weights=values[:, c], minlength=n_rows)
    return out


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Propagate gradients from ``root`` to every reachable node.

    Returns a mapping from ``id(node)`` to its accumulated gradient. Nodes
    whose gradient never materialized are absent.
    """
    grads: dict[int, np.ndarray] = {}
    if not root.requires_grad:
        return grads
    order = _topological_order(root)
    grads[id(root)] = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=root.dtype)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return grads


def gradients(root: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradient of scalar ``root`` with respect to each leaf (zeros if unreached)."""
    grads = backward(root)
    out = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        out.append(np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape))
    return out
