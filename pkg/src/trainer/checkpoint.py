"""Checkpoints: one flat little-endian tensor file plus a JSON manifest.

``<dir>/checkpoint.json`` records the model configuration, the scene box and
the name, shape and element offset of every parameter block;
``<dir>/params.bin`` holds the blocks back to back as little-endian float32,
whatever precision they were trained in. An ``oracle`` checkpoint
carries no parameters and stands in for a perfect predictor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from src.errors import DatasetError
from src.formats import atomic_write_bytes, read_json, write_json
from src.grad.store import ParameterStore
from src.trainer.model import CountingModel, ModelConfig
from src.volume import BoundingBox

FORMAT_VERSION = 1
MANIFEST = "checkpoint.json"
TENSORS = "params.bin"
_ITEM = np.dtype("<f4")


class TensorEntry(BaseModel):
    name: str
    shape: list[int]
    offset: int


class CheckpointManifest(BaseModel):
    format_version: int = FORMAT_VERSION
    kind: Literal["model", "oracle"]
    dtype: Literal["float32"] = "float32"
    model_config_: ModelConfig | None = Field(default=None, alias="model_config")
    bbox: dict[str, list[float]]
    tensors: list[TensorEntry] = []
    metadata: dict[str, Any] = {}

    model_config = ConfigDict(populate_by_name=True, protected_namespaces=())


@dataclass
class Checkpoint:
    """A trained model (or the oracle) ready for evaluation."""

    kind: Literal["model", "oracle"]
    bbox: BoundingBox
    model_config: ModelConfig | None = None
    params: ParameterStore | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def oracle(cls, bbox: BoundingBox) -> Checkpoint:
        return cls(kind="oracle", bbox=bbox)

    @property
    def is_oracle(self) -> bool:
        return self.kind == "oracle"

    def model(self) -> CountingModel:
        if self.model_config is None:
            raise DatasetError("Checkpoint has no model configuration", "<memory>")
        return CountingModel(self.model_config, self.bbox)


def save_checkpoint(checkpoint: Checkpoint, out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    entries: list[TensorEntry] = []
    payload = b""
    if checkpoint.params is not None:
        names = checkpoint.params.names
        offset = 0
        for name, value in checkpoint.params.items():
            entries.append(TensorEntry(name=name, shape=list(value.shape), offset=offset))
            offset += value.size
        flat = checkpoint.params.flatten() if names else np.zeros(0)
        payload = flat.astype(_ITEM).tobytes()

    manifest = CheckpointManifest(
        kind=checkpoint.kind,
        model_config_=checkpoint.model_config,
        bbox=checkpoint.bbox.to_dict(),
        tensors=entries,
        metadata=checkpoint.metadata,
    )
    atomic_write_bytes(out_dir / TENSORS, payload)
    write_json(out_dir / MANIFEST, manifest.model_dump(mode="json", by_alias=True))
    logger.info("Saved {} checkpoint ({} blocks) to {}", checkpoint.kind, len(entries), out_dir)
    return out_dir


def load_checkpoint(path: Path | str) -> Checkpoint:
    """Load a checkpoint directory (or its ``checkpoint.json``)."""
    path = Path(path)
    root = path.parent if path.name == MANIFEST else path
    raw = read_json(root / MANIFEST)
    try:
        manifest = CheckpointManifest.model_validate(raw)
    except ValueError as exc:
        raise DatasetError(f"Invalid checkpoint manifest ({exc})", root / MANIFEST) from exc
    if manifest.format_version != FORMAT_VERSION:
        raise DatasetError(f"Unsupported checkpoint format {manifest.format_version}", root / MANIFEST)

    bbox = BoundingBox.from_dict(manifest.bbox)
    if manifest.kind == "oracle":
        return Checkpoint.oracle(bbox)

    try:
        buf = (root / TENSORS).read_bytes()
    except OSError as exc:
        raise DatasetError(f"Cannot read checkpoint tensors ({exc.strerror})", root / TENSORS) from exc
    if len(buf) % _ITEM.itemsize:
        raise DatasetError(
            f"Tensor file size {len(buf)} is not a multiple of {_ITEM.itemsize} bytes", root / TENSORS
        )
    flat = np.frombuffer(buf, dtype=_ITEM)
    store = ParameterStore()
    for entry in manifest.tensors:
        size = int(np.prod(entry.shape))
        if entry.offset + size > flat.size:
            raise DatasetError(f"Tensor {entry.name} runs past the end of the file", root / TENSORS)
        block = flat[entry.offset : entry.offset + size].reshape(entry.shape)
        store.add(entry.name, block.astype(np.float32))
    return Checkpoint(
        kind="model",
        bbox=bbox,
        model_config=manifest.model_config_,
        params=store,
        metadata=manifest.metadata,
    )
