"""Named, ordered parameter blocks with a flat-vector view."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from src.errors import ContractError
from src.grad.tape import Tensor


class ParameterStore:
    """Ordered mapping ``name -> ndarray`` shared by training, checkpoints and
    gradient checks.

    Block order is insertion order; ``flatten`` concatenates blocks in that
    order and ``unflatten`` inverts it exactly.
    """

    def __init__(self, blocks: Mapping[str, np.ndarray] | None = None) -> None:
        self._blocks: dict[str, np.ndarray] = {}
        for name, value in (blocks or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._blocks:
            raise ContractError(f"Duplicate parameter block: {name}")
        arr = np.asarray(value)
        if not np.all(np.isfinite(arr)):
            raise ContractError(f"Parameter block {name} holds non-finite values")
        self._blocks[name] = arr

    # ------------------------------------------------------------------
    # Mapping protocol
    # ------------------------------------------------------------------

    def __getitem__(self, name: str) -> np.ndarray:
        return self._blocks[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._blocks:
            raise KeyError(name)
        if np.shape(value) != self._blocks[name].shape:
            raise ContractError(
                f"Shape mismatch for {name}: {np.shape(value)} != {self._blocks[name].shape}"
            )
        self._blocks[name] = np.asarray(value, dtype=self._blocks[name].dtype)

    def __contains__(self, name: object) -> bool:
        return name in self._blocks

    def __iter__(self) -> Iterator[str]:
        return iter(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    @property
    def names(self) -> list[str]:
        return list(self._blocks)

    def items(self) -> list[tuple[str, np.ndarray]]:
        return list(self._blocks.items())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self._blocks.items()}

    @property
    def size(self) -> int:
        return sum(arr.size for arr in self._blocks.values())

    # ------------------------------------------------------------------
    # Flat view
    # ------------------------------------------------------------------

    def blocks(self) -> list[tuple[str, slice]]:
        """Slices of the flat vector occupied by each block."""
        out = []
        offset = 0
        for name, arr in self._blocks.items():
            out.append((name, slice(offset, offset + arr.size)))
            offset += arr.size
        return out

    def flatten(self) -> np.ndarray:
        if not self._blocks:
            return np.zeros(0)
        return np.concatenate([arr.ravel() for arr in self._blocks.values()])

    def unflatten(self, vector: np.ndarray) -> ParameterStore:
        """A new store with this store's layout holding ``vector``."""
        vector = np.asarray(vector)
        if vector.shape != (self.size,):
            raise ContractError(f"Flat vector has shape {vector.shape}, expected ({self.size},)")
        out = ParameterStore()
        for name, sl in self.blocks():
            ref = self._blocks[name]
            out.add(name, vector[sl].reshape(ref.shape).astype(ref.dtype))
        return out

    # ------------------------------------------------------------------
    # Conversions
    # ------------------------------------------------------------------

    def copy(self) -> ParameterStore:
        return ParameterStore({name: arr.copy() for name, arr in self._blocks.items()})

    def astype(self, dtype: np.dtype | type) -> ParameterStore:
        return ParameterStore({name: arr.astype(dtype) for name, arr in self._blocks.items()})

    def as_leaves(self) -> dict[str, Tensor]:
        """Fresh gradient-tracking leaves, one per block."""
        return {name: Tensor(arr, requires_grad=True) for name, arr in self._blocks.items()}

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self._blocks)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {name: arr for name, arr in self._blocks.items() if name.startswith(prefix)}
