"""Model assembly, optimization, evaluation and ablations."""

from src.trainer.ablate import AblationMatrix, AblationTable, ablate
from src.trainer.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.trainer.evaluate import EvalConfig, EvalReport, evaluate, predict_scene_count, psnr
from src.trainer.model import CountingModel, ModelConfig
from src.trainer.optim import AdamState, adam_step
from src.trainer.train import TrainConfig, TrainResult, train

__all__ = [
    "AblationMatrix",
    "AblationTable",
    "AdamState",
    "Checkpoint",
    "CountingModel",
    "EvalConfig",
    "EvalReport",
    "ModelConfig",
    "TrainConfig",
    "TrainResult",
    "ablate",
    "adam_step",
    "evaluate",
    "load_checkpoint",
    "predict_scene_count",
    "psnr",
    "save_checkpoint",
    "train",
]
