"""PNG / binary-PGM image IO.

Decoding is limited to these two formats on purpose (no heavyweight codecs);
PNG goes through Pillow, PGM export is written by hand so heatmap artifacts
are byte-deterministic.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

SUPPORTED_SUFFIXES = (".png", ".pgm")


def read_image(path: str | Path) -> np.ndarray:
    """Load an image as (h, w, 3) float64 in [0, 1]; grayscale is replicated."""
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise FormatError(f"unsupported image format {path.suffix!r} for {path}")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"unreadable image {path}: {exc}") from exc
    return arr / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    """Load a ground-truth mask as (h, w) {0,1}; any nonzero pixel counts."""
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise FormatError(f"unsupported mask format {path.suffix!r} for {path}")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except Exception as exc:
        raise FormatError(f"unreadable mask {path}: {exc}") from exc
    return (arr > 0).astype(np.float64)


def write_png(path: str | Path, values01: np.ndarray) -> None:
    """Write a [0,1] array as 8-bit PNG: (h,w,3) -> RGB, (h,w) -> grayscale."""
    arr = np.clip(np.asarray(values01), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    mode = "RGB" if data.ndim == 3 else "L"
    Image.fromarray(data, mode=mode).save(Path(path), format="PNG")


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Write an (h, w) uint8 array as binary PGM (P5, maxval 255)."""
    arr = np.asarray(gray, dtype=np.uint8)
    if arr.ndim != 2:
        raise FormatError(f"PGM payload must be 2-D, got shape {arr.shape}")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())
