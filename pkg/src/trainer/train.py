"""Training loop: one scene per step, Adam over every parameter block.

Each step draws a scene from the eligibility pool, samples rays in all of
its views, evaluates the objective on the tape and applies one Adam update.
Labeled scenes contribute FSL (and, when enabled, SSL); unlabeled scenes
contribute SSL only. Random draws are identical whatever the SSL flags say,
so a run whose SSL terms are all zero matches an FSL-only run bit for bit.
"""

from __future__ import annotations

import json
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from src.errors import ContractError, NonFiniteLoss
from src.formats import atomic_write_text
from src.grad import tape
from src.grad.store import ParameterStore
from src.losses import LossWeights, total_loss
from src.synth.dataset import Dataset, SceneRecord
from src.trainer.checkpoint import Checkpoint
from src.trainer.model import (
    CountingModel,
    ModelConfig,
    PreparedScene,
    encoder_density_at,
    gt_sample_density,
    sample_training_rays,
)
from src.trainer.optim import AdamState, adam_step

PRECISIONS = {"float32": np.float32, "float64": np.float64}


class TrainConfig(BaseModel):
    """Optimization, sampling and supervision settings of one run."""

    model_config = ConfigDict(extra="forbid")

    steps: int = Field(default=2000, ge=1)
    lr: float = Field(default=1e-3, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    volume_lr_scale: float = Field(default=10.0, ge=0)
    rays_per_view: int = Field(default=64, ge=1)
    samples: int = Field(default=32, ge=2)
    weights: LossWeights = Field(default_factory=LossWeights)
    rdens_target_scale: float = Field(default=1.0, ge=0)
    labeled_fraction: float = Field(default=1.0, gt=0, le=1)
    ssl_on_labeled: bool = True
    ssl_on_unlabeled: bool = True
    ssl_on_validation: bool = False
    seed: int = 0
    precision: Literal["float32", "float64"] = "float32"
    log_interval: int = Field(default=50, ge=1)

    @property
    def dtype(self) -> type:
        return PRECISIONS[self.precision]


@dataclass
class PoolEntry:
    scene: PreparedScene
    labeled: bool
    weights: LossWeights


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict[str, Any]] = field(default_factory=list)
    labeled_ids: list[str] = field(default_factory=list)
    final_loss: float = 0.0


# ---------------------------------------------------------------------------
# Scene selection
# ---------------------------------------------------------------------------

def split_labeled(scene_ids: list[str], fraction: float, seed: int) -> list[str]:
    """Deterministic subset of ``scene_ids`` that keeps its labels."""
    ids = sorted(scene_ids)
    n = int(round(fraction * len(ids)))
    if ids and fraction > 0:
        n = max(1, n)
    order = np.random.default_rng([seed, len(ids), 7]).permutation(len(ids))
    return sorted(ids[int(i)] for i in order[:n])


def build_pool(
    config: TrainConfig,
    train_scenes: list[SceneRecord],
    val_scenes: list[SceneRecord],
    labeled_ids: set[str],
    prepare: Callable[[SceneRecord], PreparedScene],
) -> list[PoolEntry]:
    """Scenes a training step may draw, with the loss weights each one uses."""
    weights = config.weights
    fsl_only = weights.model_copy(update={"rdens": 0.0, "depth": 0.0, "rgb": 0.0})
    ssl_only = weights.without_fsl()

    pool: list[PoolEntry] = []
    for record in sorted(train_scenes, key=lambda s: s.scene_id):
        if record.scene_id in labeled_ids:
            pool.append(PoolEntry(prepare(record), True, weights if config.ssl_on_labeled else fsl_only))
        elif config.ssl_on_unlabeled and ssl_only.ssl_active:
            pool.append(PoolEntry(prepare(record), False, ssl_only))
    if config.ssl_on_validation and ssl_only.ssl_active:
        for record in sorted(val_scenes, key=lambda s: s.scene_id):
            pool.append(PoolEntry(prepare(record), False, ssl_only))
    return pool


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def train_step(
    model: CountingModel,
    params: ParameterStore,
    entry: PoolEntry,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Any, dict[str, np.ndarray], dict[str, Any]]:
    """Loss, gradients per block and the term report for one scene."""
    sample = sample_training_rays(
        entry.scene, config.rays_per_view, config.samples, rng, model.bbox, config.dtype
    )
    if sample.rays.size == 0:
        raise ContractError(f"No sampled ray of {entry.scene.scene_id} hits the scene box")
    leaves = params.as_leaves()
    encoding = model.encode(leaves, entry.scene)
    render = model.render(leaves, encoding, sample.rays)
    targets = sample.targets(encoder_density_at(encoding, sample, config.rdens_target_scale))
    loss, report = total_loss(
        encoding.density_maps,
        entry.scene.density_maps,
        render,
        targets,
        gt_sample_density(entry.scene, model.bbox, sample.rays),
        entry.weights,
        labeled=entry.labeled,
    )
    if isinstance(loss, tape.Tensor):
        grads = tape.gradients(loss, [leaves[name] for name in params.names])
    else:
        grads = [np.zeros_like(params[name]) for name in params.names]
    return loss, dict(zip(params.names, grads)), report.model_dump()


def train(
    config: TrainConfig,
    dataset: Dataset,
    model_config: ModelConfig,
    *,
    metrics_path: Path | str | None = None,
) -> TrainResult:
    """Train a model on ``dataset``.

    Args:
        config: Optimization and supervision settings.
        dataset: Loaded synthetic dataset.
        model_config: Architecture of the model to train.
        metrics_path: Optional JSON-lines file receiving one record per
            logged step.

    Raises:
        ContractError: No scene is eligible for training.
        NonFiniteLoss: The objective became NaN or Inf.
    """
    dtype = config.dtype
    model = CountingModel(model_config, dataset.bbox)
    init_seq, step_seq = np.random.SeedSequence(config.seed).spawn(2)
    params = model.init_params(np.random.default_rng(init_seq), dtype)
    step_rng = np.random.default_rng(step_seq)

    train_scenes = dataset.split("train")
    labeled_ids = split_labeled([s.scene_id for s in train_scenes], config.labeled_fraction, config.seed)
    pool = build_pool(
        config,
        train_scenes,
        dataset.split("val"),
        set(labeled_ids),
        lambda record: model.prepare(record, dtype),
    )
    if not pool:
        raise ContractError("No scene is eligible for training; check labeled_fraction and SSL flags")
    logger.info(
        "Training {} steps on {} scenes ({} labeled), {} parameters, {}",
        config.steps,
        len(pool),
        sum(e.labeled for e in pool),
        params.size,
        config.precision,
    )

    lr_scale = model.lr_scales(config.volume_lr_scale)
    state = AdamState()
    metrics: list[dict[str, Any]] = []
    loss_value = 0.0
    started = time.perf_counter()
    for step in range(1, config.steps + 1):
        entry = pool[int(step_rng.integers(len(pool)))]
        loss, grads, report = train_step(model, params, entry, config, step_rng)
        loss_value = float(tape.as_tensor(loss).data)
        if not np.isfinite(loss_value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLoss(f"Objective became non-finite on {entry.scene.scene_id}", step=step)

        updated, state = adam_step(
            params.as_dict(),
            grads,
            state,
            config.lr,
            config.beta1,
            config.beta2,
            config.eps,
            lr_scale=lr_scale,
        )
        params = ParameterStore(updated)

        if step % config.log_interval == 0 or step == config.steps:
            record = {"step": step, "scene_id": entry.scene.scene_id, **report}
            metrics.append(record)
            logger.info(
                "step {:>5} | {} | loss {:.5f} (fsl {:.5f}, ssl {:.5f})",
                step,
                entry.scene.scene_id,
                report["total"],
                report["fsl"],
                report["ssl"],
            )

    logger.info("Training finished in {:.1f}s", time.perf_counter() - started)
    if metrics_path is not None:
        atomic_write_text(metrics_path, "".join(json.dumps(m, sort_keys=True) + "\n" for m in metrics))

    checkpoint = Checkpoint(
        kind="model",
        bbox=dataset.bbox,
        model_config=model_config,
        params=params.astype(np.float32),
        metadata={
            "steps": config.steps,
            "seed": config.seed,
            "precision": config.precision,
            "labeled_ids": labeled_ids,
        },
    )
    return TrainResult(checkpoint=checkpoint, metrics=metrics, labeled_ids=labeled_ids, final_loss=loss_value)
