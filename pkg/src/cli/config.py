"""Run configuration: one pydantic model per concern, loaded from JSON or YAML.

Every section forbids unknown keys and every field has a default, so ``{}``
is a valid configuration. ``--set section.field=value`` overrides are applied
to the raw mapping before validation; values parse as JSON and fall back to
plain strings.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field

from src.errors import ContractError, DatasetError
from src.grad.harness import GradcheckConfig
from src.synth.scene import SynthConfig
from src.trainer.ablate import AblationMatrix
from src.trainer.evaluate import EvalConfig
from src.trainer.model import ModelConfig
from src.trainer.train import TrainConfig


class RenderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    samples: int = Field(default=64, ge=2)
    chunk: int = Field(default=4096, ge=1)
    bev: bool = True


class RunConfig(BaseModel):
    """Everything a subcommand may need."""

    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    seed: int = 0
    synth: SynthConfig = Field(default_factory=SynthConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)
    ablation: AblationMatrix = Field(default_factory=lambda: AblationMatrix(preset="labeled-split"))

    def with_seed(self, seed: int) -> RunConfig:
        """Propagate one seed to every seeded section.

        Ablation seeds become ``seed, seed + 1, ...``, keeping their count.
        """
        replicas = [seed + k for k in range(len(self.ablation.seeds))]
        return self.model_copy(
            update={
                "seed": seed,
                "train": self.train.model_copy(update={"seed": seed}),
                "eval": self.eval.model_copy(update={"seed": seed}),
                "ablation": self.ablation.model_copy(update={"seeds": replicas}),
            }
        )

    def sequential(self) -> RunConfig:
        """One worker for every stage that can fan out."""
        return self.model_copy(
            update={
                "synth": self.synth.model_copy(update={"workers": 1}),
                "ablation": self.ablation.model_copy(update={"workers": 1}),
            }
        )


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` -> (["a", "b", "c"], parsed value)."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ContractError(f"Override must look like section.field=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    out = json.loads(json.dumps(raw))
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ContractError(f"Cannot override inside non-mapping key {part!r} ({text!r})")
            node = child
        node[path[-1]] = value
    return out


def read_config_file(path: Path | str) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"Cannot read config ({exc.strerror})", path) from exc
    try:
        if path.suffix in {".yaml", ".yml"}:
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise DatasetError(f"Config is not valid {path.suffix.lstrip('.') or 'JSON'} ({exc})", path) from exc
    if not isinstance(data, dict):
        raise ContractError(f"Config root must be a mapping: {path}")
    return data


def load_run_config(path: Path | str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read, override and validate a run configuration.

    Raises:
        DatasetError: The file cannot be read or parsed.
        pydantic.ValidationError: Unknown keys or invalid values.
    """
    raw = read_config_file(path) if path is not None else {}
    return RunConfig.model_validate(apply_overrides(raw, overrides or []))
