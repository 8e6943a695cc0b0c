"""Exception hierarchy shared by every module."""

from __future__ import annotations

from pathlib import Path


class SslCountError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(SslCountError, ValueError):
    """A precondition or shape contract was violated by the caller."""


class PointBehindCamera(SslCountError):
    """The projected point lies on or behind the camera plane."""

    def __init__(self, depth: float) -> None:
        super().__init__(f"Point is not in front of the camera (z={depth:.3g})")
        self.depth = depth


class EmptyInput(SslCountError, ValueError):
    """A reduction was asked to average over zero elements."""


class NonFiniteLoss(SslCountError):
    """The forward pass produced NaN or Inf."""

    def __init__(self, message: str, step: int | None = None) -> None:
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class DatasetError(SslCountError):
    """Reading or writing an on-disk artifact failed."""

    def __init__(self, message: str, path: Path | str) -> None:
        super().__init__(f"{message}: {path}")
        self.path = Path(path)


class GradcheckFailed(SslCountError):
    """Reverse-mode and finite-difference gradients disagree."""
