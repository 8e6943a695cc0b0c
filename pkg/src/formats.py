"""On-disk formats: PPM (P6) images, PFM float maps, raw f32 arrays, JSON.

Every writer goes through ``atomic_write_bytes`` (temp file + rename) so a
crash never leaves a half-written artifact, and every writer is byte-exact
for identical input.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from src.errors import DatasetError


# ---------------------------------------------------------------------------
# Atomic writes and JSON
# ---------------------------------------------------------------------------

def atomic_write_bytes(path: Path | str, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise DatasetError(f"Cannot write file ({exc.strerror})", path) from exc


def atomic_write_text(path: Path | str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj: Any) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path: Path | str, obj: Any) -> None:
    atomic_write_text(path, dumps_json(obj))


def read_json(path: Path | str) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DatasetError(f"Cannot read file ({exc.strerror})", path) from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"Invalid JSON ({exc.msg} at line {exc.lineno})", path) from exc


def _read_bytes(path: Path | str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"Cannot read file ({exc.strerror})", path) from exc


# ---------------------------------------------------------------------------
# PPM (binary P6, maxval 255)
# ---------------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """Float image in [0, 1] -> uint8 with round-half-up quantization."""
    if image.dtype == np.uint8:
        return image
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path: Path | str, image: np.ndarray) -> None:
    """Write an HxWx3 image (uint8, or float in [0, 1]) as binary PPM."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetError(f"PPM expects an HxWx3 image, got shape {image.shape}", path)
    pixels = to_uint8(image)
    height, width = pixels.shape[:2]
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + np.ascontiguousarray(pixels).tobytes())


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path: Path | str) -> np.ndarray:
    """Read a binary PPM as an HxWx3 uint8 array."""
    data = _read_bytes(path)
    try:
        tokens, offset = _header_tokens(data, 4)
        if tokens[0] != b"P6":
            raise ValueError(f"unsupported magic {tokens[0]!r}")
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval}")
        raster = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=offset)
    except ValueError as exc:
        raise DatasetError(f"Malformed PPM ({exc})", path) from exc
    return raster.reshape(height, width, 3).copy()


# ---------------------------------------------------------------------------
# PFM (little-endian, scale -1.0, rows stored bottom-to-top)
# ---------------------------------------------------------------------------

def write_pfm(path: Path | str, values: np.ndarray) -> None:
    """Write an HxW (``Pf``) or HxWx3 (``PF``) float map."""
    if values.ndim == 2:
        magic = "Pf"
    elif values.ndim == 3 and values.shape[2] == 3:
        magic = "PF"
    else:
        raise DatasetError(f"PFM expects HxW or HxWx3, got shape {values.shape}", path)
    height, width = values.shape[:2]
    header = f"{magic}\n{width} {height}\n-1.0\n".encode("ascii")
    raster = np.ascontiguousarray(np.flipud(values).astype("<f4"))
    atomic_write_bytes(path, header + raster.tobytes())


def read_pfm(path: Path | str) -> np.ndarray:
    """Read a PFM map as float32, top row first."""
    data = _read_bytes(path)
    try:
        tokens, offset = _header_tokens(data, 4)
        magic = tokens[0]
        if magic not in (b"Pf", b"PF"):
            raise ValueError(f"unsupported magic {magic!r}")
        width, height, scale = int(tokens[1]), int(tokens[2]), float(tokens[3])
        channels = 3 if magic == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        raster = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=offset)
    except ValueError as exc:
        raise DatasetError(f"Malformed PFM ({exc})", path) from exc
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(raster.reshape(shape)).astype(np.float32)


# ---------------------------------------------------------------------------
# Raw little-endian float32
# ---------------------------------------------------------------------------

def write_raw_f32(path: Path | str, values: np.ndarray) -> None:
    atomic_write_bytes(path, np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_raw_f32(path: Path | str, count: int | None = None) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) % 4:
        raise DatasetError(f"Raw float file size {len(data)} is not a multiple of 4", path)
    values = np.frombuffer(data, dtype="<f4").astype(np.float32)
    if count is not None and values.size != count:
        raise DatasetError(f"Expected {count} floats, found {values.size}", path)
    return values
