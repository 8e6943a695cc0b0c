"""Counting metrics: scene-level and per-view MAE / NAE, plus render PSNR."""

from __future__ import annotations

from typing import Literal

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from src.errors import ContractError
from src.renderer import ViewRender, render_view
from src.synth.dataset import Dataset, SceneRecord
from src.trainer.checkpoint import Checkpoint
from src.trainer.model import PreparedScene
from src.volume import DensityVolume, integrate_trapezoid


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    split: Literal["train", "val", "all"] = "val"
    psnr: bool = False
    psnr_samples: int = Field(default=64, ge=2)
    seed: int = 0


class CameraError(BaseModel):
    camera: int
    mae: float
    nae: float


class SceneResult(BaseModel):
    scene_id: str
    gt: float
    pred: float
    abs_error: float
    view_gt: list[float]
    view_pred: list[float]
    psnr: float | None = None


class EvalReport(BaseModel):
    """Counting errors over one split."""

    split: str
    scenes: int
    mae: float
    nae: float
    view_mae: float
    view_nae: float
    per_camera: list[CameraError]
    per_scene: list[SceneResult]
    mean_psnr: float | None = None


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.size == 0:
        return 0.0
    return float(np.mean(np.abs(pred - gt)))


def nae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Absolute error normalized by ``max(gt, 1)``, averaged."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.size == 0:
        return 0.0
    return float(np.mean(np.abs(pred - gt) / np.maximum(gt, 1.0)))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"PSNR operands differ in shape: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / err))


def count_from_density_volume(volume: DensityVolume) -> float:
    return integrate_trapezoid(volume.density, volume.bbox)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _prepare(checkpoint: Checkpoint, scene: SceneRecord) -> PreparedScene:
    model = checkpoint.model()
    dtype = checkpoint.params[checkpoint.params.names[0]].dtype.type
    return model.prepare(scene, dtype)


def predict_scene_count(checkpoint: Checkpoint, scene: SceneRecord) -> float:
    """Integral of predicted volume density over the scene box."""
    if checkpoint.is_oracle:
        return float(scene.count)
    prepared = _prepare(checkpoint, scene)
    return checkpoint.model().predict_count(checkpoint.params.as_dict(), prepared)


def predict_view_counts(checkpoint: Checkpoint, scene: SceneRecord) -> np.ndarray:
    """Per-view sums of the encoder's density maps."""
    if checkpoint.is_oracle:
        return scene.view_counts.astype(np.float64)
    model = checkpoint.model()
    encoding = model.encode(checkpoint.params.as_dict(), _prepare(checkpoint, scene))
    maps = np.asarray(encoding.density_maps, dtype=np.float64)
    return maps.reshape(maps.shape[0], -1).sum(axis=1)


def render_training_views(
    checkpoint: Checkpoint, scene: SceneRecord, samples: int, rng: np.random.Generator
) -> list[ViewRender]:
    """Render every camera of ``scene`` at full resolution."""
    if checkpoint.is_oracle:
        raise ContractError("The oracle checkpoint has no fields to render")
    model = checkpoint.model()
    params = checkpoint.params.as_dict()
    encoding = model.encode(params, _prepare(checkpoint, scene))
    nets = model.field_nets(params)
    return [
        render_view(encoding.volume, model.bbox, nets, camera, samples, rng) for camera in scene.cameras
    ]


def scene_psnr(checkpoint: Checkpoint, scene: SceneRecord, samples: int, rng: np.random.Generator) -> float:
    renders = render_training_views(checkpoint, scene, samples, rng)
    return psnr(np.stack([np.clip(r.color, 0.0, 1.0) for r in renders]), scene.images)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(checkpoint: Checkpoint, dataset: Dataset, config: EvalConfig | None = None) -> EvalReport:
    """Scene-level and per-view counting errors over ``config.split``."""
    config = config or EvalConfig()
    scenes = sorted(dataset.split(config.split), key=lambda s: s.scene_id)
    if not scenes:
        raise ContractError(f"Split '{config.split}' has no scenes")
    rng = np.random.default_rng(config.seed)

    results: list[SceneResult] = []
    for scene in scenes:
        pred = predict_scene_count(checkpoint, scene)
        view_pred = predict_view_counts(checkpoint, scene)
        results.append(
            SceneResult(
                scene_id=scene.scene_id,
                gt=float(scene.count),
                pred=pred,
                abs_error=abs(pred - scene.count),
                view_gt=[float(c) for c in scene.view_counts],
                view_pred=[float(c) for c in view_pred],
                psnr=scene_psnr(checkpoint, scene, config.psnr_samples, rng) if config.psnr else None,
            )
        )
        logger.debug("{}: gt {} pred {:.3f}", scene.scene_id, scene.count, pred)

    gt = np.array([r.gt for r in results])
    pred = np.array([r.pred for r in results])
    view_gt = np.concatenate([r.view_gt for r in results])
    view_pred = np.concatenate([r.view_pred for r in results])

    per_camera = []
    for camera in range(max(len(r.view_gt) for r in results)):
        cam_gt = np.array([r.view_gt[camera] for r in results if camera < len(r.view_gt)])
        cam_pred = np.array([r.view_pred[camera] for r in results if camera < len(r.view_pred)])
        per_camera.append(CameraError(camera=camera, mae=mae(cam_pred, cam_gt), nae=nae(cam_pred, cam_gt)))

    psnrs = [r.psnr for r in results if r.psnr is not None]
    report = EvalReport(
        split=config.split,
        scenes=len(results),
        mae=mae(pred, gt),
        nae=nae(pred, gt),
        view_mae=mae(view_pred, view_gt),
        view_nae=nae(view_pred, view_gt),
        per_camera=per_camera,
        per_scene=results,
        mean_psnr=float(np.mean(psnrs)) if psnrs else None,
    )
    logger.info(
        "Evaluated {} {} scenes: MAE {:.3f}, NAE {:.3f}, view MAE {:.3f}",
        report.scenes,
        report.split,
        report.mae,
        report.nae,
        report.view_mae,
    )
    return report
