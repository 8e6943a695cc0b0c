"""Synthetic dataset generation and loading.

Layout written by ``generate_dataset``::

    <out>/dataset.json
    <out>/scene_0000/manifest.json      scene id, count, split, views, files
    <out>/scene_0000/scene.json         entities and cameras
    <out>/scene_0000/cameras/cam_0.json
    <out>/scene_0000/view_0.ppm         RGB, P6
    <out>/scene_0000/depth_0.pfm        oracle composited depth
    <out>/scene_0000/accum_0.pfm        oracle sum of weights
    <out>/scene_0000/density_0.pfm      GT density map, feature resolution
    <out>/scene_0000/density_volume.f32 (+ .json sidecar)

Each scene directory is assembled under a temporary name and renamed into
place, so readers never observe a partial scene.
"""

from __future__ import annotations

import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel

from src.errors import DatasetError
from src.formats import read_json, read_pfm, read_ppm, to_uint8, write_json, write_pfm, write_ppm
from src.geometry import CameraModel, load_camera, save_camera
from src.losses import SupervisionBundle
from src.synth.oracle import gt_density_map_2d, gt_density_volume, oracle_render_view
from src.synth.scene import SceneSpec, SynthConfig, random_scene
from src.volume import BoundingBox, DensityVolume, load_volume, save_volume

FORMAT_VERSION = 1


class SceneEntry(BaseModel):
    scene_id: str
    split: str
    count: int
    path: str


class DatasetManifest(BaseModel):
    format_version: int = FORMAT_VERSION
    seed: int
    num_scenes: int
    scenes: list[SceneEntry]
    config: SynthConfig


@dataclass
class SceneArtifacts:
    """Everything generated for one scene, before it touches the disk."""

    scene_id: str
    split: str
    scene: SceneSpec
    images: np.ndarray  # (V, H, W, 3) uint8
    depth: np.ndarray  # (V, H, W) float32
    accumulation: np.ndarray  # (V, H, W) float32
    density_maps: np.ndarray  # (V, h, w) float32
    density_volume: DensityVolume


@dataclass
class SceneRecord:
    """A scene loaded back from disk, ready for training or evaluation."""

    scene_id: str
    split: str
    count: int
    cameras: list[CameraModel]
    images: np.ndarray  # (V, H, W, 3) float in [0, 1]
    depth_prior: np.ndarray  # (V, H, W)
    accumulation: np.ndarray  # (V, H, W)
    density_maps: np.ndarray  # (V, h, w)
    density_volume: DensityVolume
    path: Path | None = None

    @property
    def bbox(self) -> BoundingBox:
        return self.density_volume.bbox

    @property
    def views(self) -> int:
        return len(self.cameras)

    @property
    def view_counts(self) -> np.ndarray:
        return self.density_maps.reshape(self.views, -1).sum(axis=1)

    def bundle(self) -> SupervisionBundle:
        return SupervisionBundle(
            density_maps=self.density_maps,
            images=self.images,
            depth_prior=self.depth_prior,
            accumulation=self.accumulation,
            density_volume=self.density_volume,
        )


@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    scenes: list[SceneRecord]

    def split(self, name: str) -> list[SceneRecord]:
        """Scenes of one split; ``all`` returns every scene."""
        if name == "all":
            return list(self.scenes)
        return [s for s in self.scenes if s.split == name]

    @property
    def bbox(self) -> BoundingBox:
        return self.scenes[0].bbox


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def scene_id(index: int) -> str:
    return f"scene_{index:04d}"


def assign_splits(num_scenes: int, val_fraction: float, seed: int) -> list[str]:
    """Deterministic train/val assignment by scene."""
    n_val = int(round(val_fraction * num_scenes))
    order = np.random.default_rng([seed, num_scenes]).permutation(num_scenes)
    splits = ["train"] * num_scenes
    for i in order[:n_val]:
        splits[int(i)] = "val"
    return splits


def build_scene(config: SynthConfig, index: int, seed: np.random.SeedSequence, split: str) -> SceneArtifacts:
    """Generate one scene and all of its ground truth in memory."""
    scene_seq, render_seq = seed.spawn(2)
    scene = random_scene(config, np.random.default_rng(scene_seq))
    render_rng = np.random.default_rng(render_seq)

    images, depths, accums, maps = [], [], [], []
    for camera in scene.cameras:
        view = oracle_render_view(scene, camera, render_rng, config.oracle_samples, config.oracle_beta)
        images.append(to_uint8(view.image))
        depths.append(view.depth.astype(np.float32))
        accums.append(view.accumulation.astype(np.float32))
        maps.append(gt_density_map_2d(scene, camera, config.splat_sigma_cells).astype(np.float32))
    volume = gt_density_volume(scene, config.density_volume_dims)
    return SceneArtifacts(
        scene_id=scene_id(index),
        split=split,
        scene=scene,
        images=np.stack(images),
        depth=np.stack(depths),
        accumulation=np.stack(accums),
        density_maps=np.stack(maps),
        density_volume=DensityVolume(volume.bbox, volume.values.astype(np.float32)),
    )


def write_scene(artifacts: SceneArtifacts, out_dir: Path) -> Path:
    """Write one scene directory atomically (temporary directory + rename)."""
    final = out_dir / artifacts.scene_id
    tmp = out_dir / f".{artifacts.scene_id}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)

    views = []
    for i, camera in enumerate(artifacts.scene.cameras):
        files = {
            "camera": f"cameras/cam_{i}.json",
            "image": f"view_{i}.ppm",
            "depth": f"depth_{i}.pfm",
            "accumulation": f"accum_{i}.pfm",
            "density_map": f"density_{i}.pfm",
        }
        save_camera(camera, tmp / files["camera"])
        write_ppm(tmp / files["image"], artifacts.images[i])
        write_pfm(tmp / files["depth"], artifacts.depth[i])
        write_pfm(tmp / files["accumulation"], artifacts.accumulation[i])
        write_pfm(tmp / files["density_map"], artifacts.density_maps[i])
        views.append({"index": i, "count": float(artifacts.density_maps[i].sum()), **files})

    save_volume(artifacts.density_volume, tmp / "density_volume.f32")
    write_json(tmp / "scene.json", artifacts.scene.to_dict())
    write_json(
        tmp / "manifest.json",
        {
            "scene_id": artifacts.scene_id,
            "count": artifacts.scene.count,
            "split": artifacts.split,
            "views": views,
            "files": {"scene": "scene.json", "density_volume": "density_volume.f32"},
        },
    )
    try:
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except OSError as exc:
        raise DatasetError(f"Cannot move scene into place ({exc.strerror})", final) from exc
    return final


def _generate_one(args: tuple[SynthConfig, int, np.random.SeedSequence, str, str]) -> SceneEntry:
    config, index, seed, split, out_dir = args
    artifacts = build_scene(config, index, seed, split)
    write_scene(artifacts, Path(out_dir))
    return SceneEntry(scene_id=artifacts.scene_id, split=split, count=artifacts.scene.count, path=artifacts.scene_id)


def generate_dataset(
    config: SynthConfig, out_dir: Path | str, seed: int, workers: int | None = None
) -> DatasetManifest:
    """Generate ``config.num_scenes`` scenes under ``out_dir``.

    Output bytes depend only on ``(config, seed)``, never on ``workers``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"Cannot create output directory ({exc.strerror})", out_dir) from exc

    workers = config.workers if workers is None else workers
    seeds = np.random.SeedSequence(seed).spawn(config.num_scenes)
    splits = assign_splits(config.num_scenes, config.val_fraction, seed)
    jobs = [(config, i, seeds[i], splits[i], str(out_dir)) for i in range(config.num_scenes)]
    logger.info("Generating {} scenes into {} (seed={}, workers={})", len(jobs), out_dir, seed, workers)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_generate_one, jobs))
    else:
        entries = [_generate_one(job) for job in jobs]

    manifest = DatasetManifest(seed=seed, num_scenes=config.num_scenes, scenes=entries, config=config)
    write_json(out_dir / "dataset.json", manifest.model_dump(mode="json"))
    logger.info(
        "Dataset ready: {} train / {} val scenes, {} people total",
        sum(e.split == "train" for e in entries),
        sum(e.split == "val" for e in entries),
        sum(e.count for e in entries),
    )
    return manifest


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def load_scene(scene_dir: Path | str) -> SceneRecord:
    scene_dir = Path(scene_dir)
    manifest = read_json(scene_dir / "manifest.json")
    try:
        views = sorted(manifest["views"], key=lambda v: v["index"])
        cameras = [load_camera(scene_dir / v["camera"]) for v in views]
        images = np.stack([read_ppm(scene_dir / v["image"]) for v in views]).astype(np.float64) / 255.0
        depth = np.stack([read_pfm(scene_dir / v["depth"]) for v in views])
        accumulation = np.stack([read_pfm(scene_dir / v["accumulation"]) for v in views])
        maps = np.stack([read_pfm(scene_dir / v["density_map"]) for v in views])
        volume = load_volume(scene_dir / manifest["files"]["density_volume"])
        record = SceneRecord(
            scene_id=str(manifest["scene_id"]),
            split=str(manifest["split"]),
            count=int(manifest["count"]),
            cameras=cameras,
            images=images,
            depth_prior=depth.astype(np.float64),
            accumulation=accumulation.astype(np.float64),
            density_maps=maps.astype(np.float64),
            density_volume=DensityVolume(volume.bbox, volume.values),
            path=scene_dir,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"Malformed scene manifest ({exc})", scene_dir / "manifest.json") from exc
    return record


def load_dataset(root: Path | str) -> Dataset:
    root = Path(root)
    raw = read_json(root / "dataset.json")
    try:
        manifest = DatasetManifest.model_validate(raw)
    except ValueError as exc:
        raise DatasetError(f"Invalid dataset manifest ({exc})", root / "dataset.json") from exc
    scenes = [load_scene(root / entry.path) for entry in manifest.scenes]
    if not scenes:
        raise DatasetError("Dataset contains no scenes", root)
    logger.info("Loaded {} scenes from {}", len(scenes), root)
    return Dataset(root=root, manifest=manifest, scenes=scenes)
