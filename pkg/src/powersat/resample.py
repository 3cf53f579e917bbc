"""Bilinear resampling shared by band upsampling and heatmap rendering.

Uses the half-pixel-center convention: output pixel center i samples the
input at (i + 0.5) * in / out - 0.5, with edge clamping. Sample positions
form a regular lattice independent of grid extent, so cropping at even
offsets and 2x upsampling commute away from the clamped border.
"""

from __future__ import annotations

import numpy as np


def resize_bilinear(grid: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Resample a 2-D grid to (out_rows, out_cols) bilinearly."""
    src = np.asarray(grid, dtype=np.float32)
    if src.ndim != 2 or src.size == 0:
        raise ValueError("expected a nonempty 2-D grid")
    if out_rows < 1 or out_cols < 1:
        raise ValueError("output dimensions must be positive")
    in_rows, in_cols = src.shape

    ys = (np.arange(out_rows, dtype=np.float64) + 0.5) * in_rows / out_rows - 0.5
    xs = (np.arange(out_cols, dtype=np.float64) + 0.5) * in_cols / out_cols - 0.5
    ys = np.clip(ys, 0.0, in_rows - 1.0)
    xs = np.clip(xs, 0.0, in_cols - 1.0)

    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_rows - 1)
    x1 = np.minimum(x0 + 1, in_cols - 1)
    wy = (ys - y0).astype(np.float32)[:, None]
    wx = (xs - x0).astype(np.float32)[None, :]

    top = src[y0[:, None], x0[None, :]] * (1.0 - wx) + src[y0[:, None], x1[None, :]] * wx
    bot = src[y1[:, None], x0[None, :]] * (1.0 - wx) + src[y1[:, None], x1[None, :]] * wx
    return top * (1.0 - wy) + bot * wy


def upsample_band(grid: np.ndarray, native_res: float, target_res: float = 10.0) -> np.ndarray:
    """Upsample one band grid from its native resolution to the 10 m grid.

    10 m input is returned unchanged (as float32); 20 m input is doubled in
    each spatial dimension. Other native resolutions are rejected: the
    atmospheric 60 m bands never reach this path.
    """
    src = np.asarray(grid)
    if src.ndim != 2 or src.size == 0:
        raise ValueError("expected a nonempty 2-D band grid")
    if target_res != 10.0:
        raise ValueError(f"unsupported target resolution: {target_res}")
    if native_res == 10.0:
        return src.astype(np.float32, copy=False)
    if native_res == 20.0:
        return resize_bilinear(src, src.shape[0] * 2, src.shape[1] * 2)
    raise ValueError(f"unsupported native resolution: {native_res}")
