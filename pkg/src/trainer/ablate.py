"""Ablation harness: train every (cell, seed) pair, report per-cell medians."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Literal

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.losses import LossWeights
from src.synth.dataset import Dataset
from src.trainer.evaluate import EvalConfig, EvalReport, evaluate
from src.trainer.model import ModelConfig
from src.trainer.train import TrainConfig, train

Preset = Literal["labeled-split", "regularizers"]


class AblationCell(BaseModel):
    """One row of the matrix: supervision split, SSL placement and term weights."""

    model_config = ConfigDict(extra="forbid")

    name: str
    labeled_fraction: float = Field(default=1.0, gt=0, le=1)
    ssl_on_labeled: bool = True
    ssl_on_unlabeled: bool = True
    ssl_on_validation: bool = False
    weights: LossWeights = Field(default_factory=LossWeights)

    def apply(self, config: TrainConfig, seed: int) -> TrainConfig:
        return config.model_copy(
            update={
                "seed": seed,
                "labeled_fraction": self.labeled_fraction,
                "ssl_on_labeled": self.ssl_on_labeled,
                "ssl_on_unlabeled": self.ssl_on_unlabeled,
                "ssl_on_validation": self.ssl_on_validation,
                "weights": self.weights,
            }
        )


def preset_cells(preset: Preset, labeled_fraction: float = 0.7) -> list[AblationCell]:
    """Ready-made matrices.

    ``labeled-split`` crosses two labeled fractions with three SSL placements
    (none, training part, training + validation part). ``regularizers`` grows
    the SSL objective one term at a time on a partially labeled split.
    """
    if preset == "labeled-split":
        cells = []
        for frac in (labeled_fraction, 1.0):
            pct = int(round(frac * 100))
            cells += [
                AblationCell(
                    name=f"{pct}%-fsl",
                    labeled_fraction=frac,
                    ssl_on_labeled=False,
                    ssl_on_unlabeled=False,
                ),
                AblationCell(name=f"{pct}%-ssl-train", labeled_fraction=frac),
                AblationCell(name=f"{pct}%-ssl-train+val", labeled_fraction=frac, ssl_on_validation=True),
            ]
        return cells

    def terms(rdens: float, depth: float, rgb: float) -> LossWeights:
        return LossWeights(rdens=rdens, depth=depth, rgb=rgb)

    return [
        AblationCell(name="fsl", labeled_fraction=labeled_fraction, weights=terms(0, 0, 0)),
        AblationCell(name="depth", labeled_fraction=labeled_fraction, weights=terms(0, 1, 0)),
        AblationCell(name="depth+density", labeled_fraction=labeled_fraction, weights=terms(1, 1, 0)),
        AblationCell(name="depth+density+color", labeled_fraction=labeled_fraction, weights=terms(1, 1, 1)),
    ]


class AblationMatrix(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: Preset | None = None
    labeled_fraction: float = Field(default=0.7, gt=0, le=1)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    workers: int = Field(default=1, ge=1)
    cells: list[AblationCell] = Field(default_factory=list)

    @model_validator(mode="after")
    def _expand_preset(self) -> AblationMatrix:
        if not self.cells:
            if self.preset is None:
                raise ValueError("ablation matrix needs either cells or a preset")
            self.cells = preset_cells(self.preset, self.labeled_fraction)
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate ablation cell names: {names}")
        return self


class AblationRow(BaseModel):
    cell: str
    seeds: list[int]
    mae: list[float]
    nae: list[float]
    view_mae: list[float]
    median_mae: float
    median_nae: float
    median_view_mae: float


class AblationTable(BaseModel):
    split: str
    rows: list[AblationRow]

    def row(self, cell: str) -> AblationRow:
        for row in self.rows:
            if row.cell == cell:
                return row
        raise KeyError(cell)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "cell": r.cell,
                    "seeds": len(r.seeds),
                    "MAE": r.median_mae,
                    "NAE": r.median_nae,
                    "view MAE": r.median_view_mae,
                }
                for r in self.rows
            ]
        ).set_index("cell")

    def to_text(self) -> str:
        return self.to_frame().to_string(float_format=lambda x: f"{x:.3f}") + "\n"


def _run_cell(
    args: tuple[AblationCell, int, Dataset, TrainConfig, ModelConfig, EvalConfig],
) -> EvalReport:
    cell, seed, dataset, train_config, model_config, eval_config = args
    logger.info("Ablation cell {} / seed {}", cell.name, seed)
    result = train(cell.apply(train_config, seed), dataset, model_config)
    return evaluate(result.checkpoint, dataset, eval_config)


def ablate(
    matrix: AblationMatrix,
    dataset: Dataset,
    train_config: TrainConfig,
    model_config: ModelConfig,
    eval_config: EvalConfig | None = None,
    workers: int | None = None,
) -> AblationTable:
    """Train and evaluate every cell under every seed.

    Runs are independent, so ``workers`` > 1 spreads them over processes; the
    table does not depend on the worker count.
    """
    eval_config = eval_config or EvalConfig()
    workers = matrix.workers if workers is None else workers
    jobs = [
        (cell, seed, dataset, train_config, model_config, eval_config)
        for cell in matrix.cells
        for seed in matrix.seeds
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            all_reports = list(pool.map(_run_cell, jobs))
    else:
        all_reports = [_run_cell(job) for job in jobs]

    rows = []
    per_cell = len(matrix.seeds)
    for i, cell in enumerate(matrix.cells):
        reports = all_reports[i * per_cell : (i + 1) * per_cell]
        maes = [r.mae for r in reports]
        naes = [r.nae for r in reports]
        view_maes = [r.view_mae for r in reports]
        rows.append(
            AblationRow(
                cell=cell.name,
                seeds=list(matrix.seeds),
                mae=maes,
                nae=naes,
                view_mae=view_maes,
                median_mae=float(np.median(maes)),
                median_nae=float(np.median(naes)),
                median_view_mae=float(np.median(view_maes)),
            )
        )
        logger.info("Cell {}: median MAE {:.3f}", cell.name, rows[-1].median_mae)
    return AblationTable(split=eval_config.split, rows=rows)
