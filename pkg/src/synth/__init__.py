"""Synthetic multi-camera crowd scenes with analytic ground truth."""

from src.synth.dataset import Dataset, SceneRecord, generate_dataset, load_dataset
from src.synth.oracle import gt_density_map_2d, gt_density_volume, oracle_render_view
from src.synth.scene import (
    SceneSpec,
    SynthConfig,
    analytic_color,
    analytic_density,
    analytic_sdf,
    random_scene,
    ring_cameras,
)

__all__ = [
    "Dataset",
    "SceneRecord",
    "SceneSpec",
    "SynthConfig",
    "analytic_color",
    "analytic_density",
    "analytic_sdf",
    "generate_dataset",
    "gt_density_map_2d",
    "gt_density_volume",
    "load_dataset",
    "oracle_render_view",
    "random_scene",
    "ring_cameras",
]
