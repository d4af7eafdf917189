"""Tiled grayscale grids written as binary PGM (P5)."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import numpy as np

SEPARATOR = 0.5


def tile(images, ncols: int | None = None, sep: int = 1, sep_value: float = SEPARATOR) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 3 or len(imgs) == 0:
        raise ValueError("expected a nonempty (N, H, W) batch")
    n, h, w = imgs.shape
    ncols = n if ncols is None else max(1, min(ncols, n))
    nrows = -(-n // ncols)
    canvas = np.full((nrows * h + (nrows - 1) * sep, ncols * w + (ncols - 1) * sep), sep_value)
    for i, img in enumerate(imgs):
        r, c = divmod(i, ncols)
        canvas[r * (h + sep):r * (h + sep) + h, c * (w + sep):c * (w + sep) + w] = img
    return canvas


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(img: np.ndarray, path: str | Path) -> Path:
    q = quantize(img)
    h, w = q.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    """Return the uint8 pixel array of a binary PGM."""
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only maxval 255 is supported")
    body = data[m.end():]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def emit_grid(
    images,
    captions: Sequence[str],
    path: str | Path,
    ncols: int | None = None,
    png: bool = False,
) -> Path:
    """Write a PGM grid plus a ``.txt`` sidecar with one caption per tile (row-major)."""
    imgs = np.asarray(images)
    if len(imgs) == 0:
        raise ValueError("emit_grid needs at least one image")
    canvas = tile(imgs, ncols)
    path = write_pgm(canvas, path)
    ncols_eff = len(imgs) if ncols is None else max(1, min(ncols, len(imgs)))
    lines = []
    for i, cap in enumerate(captions):
        r, c = divmod(i, ncols_eff)
        lines.append(f"tile {i} (row {r}, col {c}): {cap}")
    path.with_suffix(".txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    if png:
        try:
            from PIL import Image
        except ImportError:  # PNG output is optional
            pass
        else:
            Image.fromarray(quantize(canvas), mode="L").save(path.with_suffix(".png"))
    return path
