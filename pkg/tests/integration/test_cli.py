"""Integration tests for the sslcount command line."""

import json

import pytest

from src.cli.main import run

pytestmark = pytest.mark.integration

TINY_MODEL = [
    "--set", "model.volume_dims=[6, 6, 6]",
    "--set", "model.channels=4",
    "--set", "model.hidden_width=16",
    "--set", "model.hidden_layers=1",
    "--set", "train.steps=2",
    "--set", "train.rays_per_view=8",
    "--set", "train.samples=8",
]


def error_record(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.strip()]
    return json.loads(lines[-1])


class TestExitCodes:
    """Tests for the 0 / 1 / 2 exit-code contract."""

    def test_eval_oracle(self, tiny_dataset_dir, capsys):
        """The oracle evaluates with zero error."""
        code = run(["eval", "--oracle", "--data", str(tiny_dataset_dir), "--set", "eval.split=all"])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["mae"] == 0.0
        assert report["scenes"] == 3

    def test_log_dir(self, tiny_dataset_dir, tmp_path):
        """--log-dir adds a log file next to the console output."""
        assert run(["eval", "--oracle", "--data", str(tiny_dataset_dir), "--log-dir", str(tmp_path)]) == 0
        assert list(tmp_path.glob("sslcount_*.log"))

    def test_missing_dataset_is_io_error(self, tmp_path, capsys):
        """Unreadable inputs exit with 2 and one JSON error record."""
        assert run(["eval", "--oracle", "--data", str(tmp_path / "missing")]) == 2
        record = error_record(capsys)
        assert record["status"] == "error"
        assert record["kind"] == "DatasetError"

    def test_unknown_config_key(self, capsys):
        """Validation failures exit with 1."""
        assert run(["gradcheck", "--set", "gradcheck.stepz=1"]) == 1
        assert error_record(capsys)["kind"] == "ValidationError"

    def test_eval_needs_checkpoint(self, tiny_dataset_dir, capsys):
        """eval without --checkpoint or --oracle is a contract error."""
        assert run(["eval", "--data", str(tiny_dataset_dir)]) == 1
        assert error_record(capsys)["kind"] == "ContractError"

    def test_usage_error(self, capsys):
        """Unknown subcommands exit with 1."""
        assert run(["bogus"]) == 1
        assert error_record(capsys)["kind"] == "UsageError"

    def test_bad_config_file(self, tmp_path, capsys):
        """A config that is not JSON is an I/O-class error."""
        path = tmp_path / "run.json"
        path.write_text("{oops")
        assert run(["gradcheck", "--config", str(path)]) == 2

    def test_gradcheck_tolerance_zero_fails(self, capsys):
        """A failed gradient check exits with 1 after printing its report."""
        small = [
            "--set", "gradcheck.volume_dims=[4, 4, 4]",
            "--set", "gradcheck.channels=2",
            "--set", "gradcheck.hidden_width=8",
            "--set", "gradcheck.hidden_layers=1",
            "--set", "gradcheck.views=2",
            "--set", "gradcheck.image_size=8",
            "--set", "gradcheck.rays=2",
            "--set", "gradcheck.samples=4",
            "--set", "gradcheck.max_coords_per_block=4",
        ]
        assert run(["gradcheck", "--set", "gradcheck.tolerance=0", *small]) == 1
        captured = capsys.readouterr()
        assert json.loads(captured.out)["passed"] is False
        assert json.loads(captured.err.strip().splitlines()[-1])["kind"] == "GradcheckFailed"

    @pytest.mark.slow
    def test_gradcheck_default_seed_passes(self, capsys):
        """The default gradient check exits 0 with passed=true."""
        assert run(["gradcheck", "--seed", "0"]) == 0
        assert json.loads(capsys.readouterr().out)["passed"] is True


class TestCommands:
    """Tests for full subcommand runs on tiny settings."""

    def test_synth(self, tmp_path, capsys):
        """synth writes a loadable dataset and reports it."""
        code = run(
            [
                "synth", "--out", str(tmp_path), "--seed", "1", "--sequential",
                "--set", "synth.num_scenes=1",
                "--set", "synth.views=2",
                "--set", "synth.image_size=8",
                "--set", "synth.oracle_samples=16",
                "--set", "synth.density_volume_dims=[4, 4, 4]",
            ]
        )
        assert code == 0
        assert json.loads(capsys.readouterr().out)["scenes"] == 1
        assert (tmp_path / "dataset.json").exists()
        assert (tmp_path / "scene_0000" / "view_1.ppm").exists()

    def test_train_eval_render(self, tiny_dataset_dir, tmp_path, capsys):
        """A tiny run trains, evaluates and renders."""
        ckpt = tmp_path / "run"
        assert run(["train", "--data", str(tiny_dataset_dir), "--out", str(ckpt), *TINY_MODEL]) == 0
        assert (ckpt / "checkpoint.json").exists()
        assert (ckpt / "metrics.jsonl").exists()
        capsys.readouterr()

        assert run(["eval", "--data", str(tiny_dataset_dir), "--checkpoint", str(ckpt), "--out", str(ckpt)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["split"] == "val"
        assert (ckpt / "eval.json").exists()

        scene = tiny_dataset_dir / "scene_0000"
        code = run(
            [
                "render",
                "--checkpoint", str(ckpt),
                "--scene", str(scene),
                "--camera", str(scene / "cameras" / "cam_0.json"),
                "--out", str(tmp_path / "render"),
                "--set", "render.samples=8",
            ]
        )
        assert code == 0
        files = json.loads(capsys.readouterr().out)["files"]
        assert files == ["color.ppm", "depth.pfm", "density.pfm", "bev.pfm"]
        assert all((tmp_path / "render" / name).exists() for name in files)

    def test_ablate_custom_cell(self, tiny_dataset_dir, tmp_path, capsys):
        """ablate runs a one-cell, one-seed matrix and writes its table."""
        code = run(
            [
                "ablate",
                "--data", str(tiny_dataset_dir),
                "--out", str(tmp_path),
                "--set", 'ablation.cells=[{"name": "full"}]',
                "--set", "ablation.seeds=[0]",
                *TINY_MODEL,
            ]
        )
        assert code == 0
        assert "full" in capsys.readouterr().out
        table = json.loads((tmp_path / "ablation.json").read_text())
        assert [row["cell"] for row in table["rows"]] == ["full"]
        assert (tmp_path / "ablation.txt").exists()

    def test_ablate_honours_seed(self, tiny_dataset_dir, tmp_path):
        """--seed replaces the configured ablation seeds."""
        code = run(
            [
                "ablate",
                "--data", str(tiny_dataset_dir),
                "--out", str(tmp_path),
                "--seed", "4",
                "--sequential",
                "--set", 'ablation.cells=[{"name": "full"}]',
                "--set", "ablation.seeds=[0]",
                *TINY_MODEL,
            ]
        )
        assert code == 0
        table = json.loads((tmp_path / "ablation.json").read_text())
        assert table["rows"][0]["seeds"] == [4]
