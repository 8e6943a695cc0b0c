"""Pytest configuration and shared fixtures."""

import numpy as np
import pytest

from src.geometry import CameraModel
from src.synth.dataset import generate_dataset, load_dataset
from src.synth.scene import SynthConfig
from src.trainer.model import ModelConfig
from src.trainer.train import TrainConfig
from src.volume import BoundingBox


@pytest.fixture
def rng():
    """Seeded generator so every test draw is reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def identity_camera():
    """Identity pose, unit focal length, principal point at the origin."""
    return CameraModel(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)


@pytest.fixture
def unit_bbox():
    return BoundingBox.unit()


@pytest.fixture
def tiny_synth_config():
    """Three small scenes: two train, one val."""
    return SynthConfig(
        num_scenes=3,
        entities_min=2,
        entities_max=3,
        views=2,
        image_size=16,
        density_volume_dims=(8, 8, 8),
        oracle_samples=64,
        val_fraction=0.34,
    )


@pytest.fixture
def tiny_model_config():
    return ModelConfig(volume_dims=(6, 6, 6), channels=4, hidden_width=16, hidden_layers=1)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(steps=3, rays_per_view=8, samples=8, log_interval=1)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """A generated dataset shared by every test in the session (read-only)."""
    config = SynthConfig(
        num_scenes=3,
        entities_min=2,
        entities_max=3,
        views=2,
        image_size=16,
        density_volume_dims=(8, 8, 8),
        oracle_samples=64,
        val_fraction=0.34,
    )
    out = tmp_path_factory.mktemp("dataset")
    generate_dataset(config, out, seed=7, workers=1)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)
