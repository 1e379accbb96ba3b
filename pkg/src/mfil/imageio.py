"""Portable graymap/pixmap emission for maps and sample images."""

from __future__ import annotations

import numpy as np

__all__ = ["write_pgm", "read_pgm", "write_ppm", "write_matrix_text"]


def _quantize(grid: np.ndarray) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    if hi > lo:
        g = (g - lo) / (hi - lo)
    else:
        g = np.zeros_like(g)
    return np.round(g * 255.0).astype(np.uint8)


def write_pgm(path, grid: np.ndarray):
    """Binary PGM (P5), values rescaled so the max pixel is 255."""
    g = _quantize(grid)
    if g.ndim != 2:
        raise ValueError(f"PGM wants a 2-D grid, got shape {g.shape}")
    h, w = g.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(g.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM: magic {magic!r}")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(f.readline())
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / maxval


def write_ppm(path, rgb: np.ndarray):
    """Binary PPM (P6) from a [3, H, W] or [H, W, 3] float array."""
    a = np.asarray(rgb, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 3:
        a = a.transpose(1, 2, 0)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"PPM wants [H, W, 3], got shape {a.shape}")
    g = _quantize(a)
    h, w, _ = g.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(g.tobytes())


def write_matrix_text(path, grid: np.ndarray):
    """Plain-text matrix, one row per line, for external plotting."""
    g = np.asarray(grid, dtype=np.float64)
    with open(path, "w") as f:
        for row in np.atleast_2d(g):
            f.write(" ".join(f"{v:.8e}" for v in row) + "\n")
