"""Command-line entry points."""

from src.cli.main import main, run

__all__ = ["main", "run"]
