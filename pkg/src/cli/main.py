"""``sslcount`` command-line interface.

Subcommands: synth | train | render | eval | gradcheck | ablate. Reports go
to stdout as JSON, logs to stderr. Exit codes: 0 success, 1 validation or
check failure, 2 I/O failure; on failure exactly one JSON error record is
written to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections.abc import Callable
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import ValidationError

from src.cli.config import RunConfig, load_run_config
from src.errors import ContractError, DatasetError, GradcheckFailed, NonFiniteLoss
from src.formats import atomic_write_text, write_json, write_pfm, write_ppm
from src.geometry import load_camera
from src.grad.harness import gradcheck
from src.renderer import render_view
from src.synth.dataset import generate_dataset, load_dataset, load_scene
from src.trainer.ablate import ablate
from src.trainer.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.trainer.evaluate import evaluate
from src.trainer.train import train
from src.utils.config import settings
from src.utils.logger import setup_logging
from src.volume import DensityVolume, bev_density_map

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_IO = 2


def _print_json(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _out_dir(args: argparse.Namespace, default: str) -> Path:
    return Path(args.out) if args.out else Path(settings["paths"].get("runs_dir", "runs")) / default


def _data_dir(args: argparse.Namespace) -> Path:
    return Path(getattr(args, "data", None) or settings["paths"].get("data_dir", "data/synthetic"))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(run: RunConfig, args: argparse.Namespace) -> int:
    out = Path(args.out) if args.out else _data_dir(args)
    workers = 1 if args.sequential else max(run.synth.workers, int(settings["runtime"].get("workers", 1)))
    manifest = generate_dataset(run.synth, out, run.seed, workers=workers)
    _print_json(
        {
            "status": "ok",
            "out": str(out),
            "scenes": manifest.num_scenes,
            "people": sum(e.count for e in manifest.scenes),
        }
    )
    return EXIT_OK


def cmd_train(run: RunConfig, args: argparse.Namespace) -> int:
    out = _out_dir(args, "train")
    dataset = load_dataset(_data_dir(args))
    result = train(run.train, dataset, run.model, metrics_path=out / "metrics.jsonl")
    save_checkpoint(result.checkpoint, out)
    write_json(out / "run_config.json", run.model_dump(mode="json"))
    _print_json(
        {
            "status": "ok",
            "checkpoint": str(out),
            "final_loss": result.final_loss,
            "labeled_scenes": len(result.labeled_ids),
        }
    )
    return EXIT_OK


def cmd_render(run: RunConfig, args: argparse.Namespace) -> int:
    if not args.checkpoint or not args.camera or not args.scene:
        raise ContractError("render needs --checkpoint, --camera and --scene")
    checkpoint = load_checkpoint(args.checkpoint)
    if checkpoint.is_oracle:
        raise ContractError("The oracle checkpoint has no fields to render")
    camera = load_camera(args.camera)
    scene = load_scene(args.scene)
    model = checkpoint.model()
    params = checkpoint.params.as_dict()
    prepared = model.prepare(scene, params[checkpoint.params.names[0]].dtype.type)
    encoding = model.encode(params, prepared)

    view = render_view(
        encoding.volume,
        model.bbox,
        model.field_nets(params),
        camera,
        run.render.samples,
        np.random.default_rng(run.seed),
        chunk=run.render.chunk,
    )
    out = _out_dir(args, "render")
    write_ppm(out / "color.ppm", np.clip(view.color, 0.0, 1.0))
    write_pfm(out / "depth.pfm", view.depth)
    write_pfm(out / "density.pfm", view.density)
    files = ["color.ppm", "depth.pfm", "density.pfm"]
    if run.render.bev:
        nodes = np.maximum(model.node_density(params, np.asarray(encoding.volume)), 0.0)
        write_pfm(out / "bev.pfm", bev_density_map(DensityVolume(model.bbox, nodes)))
        files.append("bev.pfm")
    _print_json({"status": "ok", "out": str(out), "files": files})
    return EXIT_OK


def cmd_eval(run: RunConfig, args: argparse.Namespace) -> int:
    dataset = load_dataset(_data_dir(args))
    if args.oracle:
        checkpoint = Checkpoint.oracle(dataset.bbox)
    elif args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
    else:
        raise ContractError("eval needs --checkpoint or --oracle")
    report = evaluate(checkpoint, dataset, run.eval)
    if args.out:
        write_json(Path(args.out) / "eval.json", report.model_dump(mode="json"))
    _print_json(report.model_dump(mode="json"))
    return EXIT_OK


def cmd_gradcheck(run: RunConfig, args: argparse.Namespace) -> int:
    report = gradcheck(run.gradcheck, run.seed)
    if args.out:
        write_json(Path(args.out) / "gradcheck.json", report.model_dump(mode="json"))
    _print_json(report.model_dump(mode="json"))
    if not report.passed:
        raise GradcheckFailed(
            f"max relative error {report.max_rel_error:.3g} exceeds tolerance {report.tolerance:g}"
        )
    return EXIT_OK


def cmd_ablate(run: RunConfig, args: argparse.Namespace) -> int:
    dataset = load_dataset(_data_dir(args))
    default_workers = int(settings["runtime"].get("workers", 1))
    workers = 1 if args.sequential else max(run.ablation.workers, default_workers)
    table = ablate(run.ablation, dataset, run.train, run.model, run.eval, workers=workers)
    out = _out_dir(args, "ablate")
    write_json(out / "ablation.json", table.model_dump(mode="json"))
    text = table.to_text()
    atomic_write_text(out / "ablation.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS: dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Run config (JSON or YAML)")
    common.add_argument("--seed", type=int, default=None, help="Seed for every random draw")
    common.add_argument(
        "--sequential", action="store_true", help="Single worker everywhere (bitwise determinism)"
    )
    common.add_argument("--out", type=str, default=None, help="Output directory")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.FIELD=VALUE",
        help="Override one config value (repeatable; value parsed as JSON)",
    )
    common.add_argument(
        "--log-level", type=str, default=None, help="Console log level (default from settings)"
    )
    common.add_argument("--log-dir", type=str, default=None, help="Also write rotating log files here")

    parser = argparse.ArgumentParser(
        prog="sslcount",
        description="Multi-view counting with rendered self-supervision",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""\
examples:
  sslcount synth --config config/default.json --out data/synthetic
  sslcount train --data data/synthetic --out runs/base
  sslcount eval --checkpoint runs/base --data data/synthetic
  sslcount render --checkpoint runs/base --scene data/synthetic/scene_0000 \\
      --camera data/synthetic/scene_0000/cameras/cam_0.json --out runs/base/render
  sslcount gradcheck --seed 0
  sslcount ablate --config config/ablation_labeled_split.json --data data/synthetic
""",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="Train a model")
    p.add_argument("--data", type=str, default=None, help="Dataset directory")
    p = sub.add_parser("render", parents=[common], help="Render one view of a scene")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--camera", type=str, default=None, help="Camera JSON file")
    p.add_argument("--scene", type=str, default=None, help="Scene directory feeding the encoder")
    p = sub.add_parser("eval", parents=[common], help="Counting errors of a checkpoint")
    p.add_argument("--data", type=str, default=None, help="Dataset directory")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--oracle", action="store_true", help="Evaluate the ground-truth oracle")
    sub.add_parser("gradcheck", parents=[common], help="Reverse mode vs finite differences")
    p = sub.add_parser("ablate", parents=[common], help="Run an ablation matrix")
    p.add_argument("--data", type=str, default=None, help="Dataset directory")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    logger.error("{}: {}", kind, message)
    sys.stderr.write(json.dumps({"status": "error", "kind": kind, "message": message}) + "\n")
    return code


def run(argv: list[str] | None = None) -> int:
    """Parse ``argv``, run the subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        return _fail("UsageError", "invalid command line (see usage above)", EXIT_CHECK)

    setup_logging(
        args.log_level or settings["logging"].get("level", "INFO"),
        args.log_dir or settings["logging"].get("dir"),
    )
    try:
        config = load_run_config(args.config, args.set)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        if args.sequential:
            config = config.sequential()
        return COMMANDS[args.command](config, args)
    except ValidationError as exc:
        return _fail("ValidationError", str(exc).replace("\n", " "), EXIT_CHECK)
    except (ContractError, NonFiniteLoss, GradcheckFailed) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_CHECK)
    except DatasetError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_IO)
    except OSError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_IO)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
