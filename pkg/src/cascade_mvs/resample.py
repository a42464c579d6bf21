"""Inter-stage resampling of depth-like maps."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=32)
def _up_matrix(n: int) -> np.ndarray:
    # output pixel i sits at input coordinate i / 2, matching K's row scaling
    x = np.minimum(np.arange(2 * n) / 2.0, n - 1)
    i0 = np.floor(x).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    f = x - i0
    m = np.zeros((2 * n, n))
    m[np.arange(2 * n), i0] += 1 - f
    m[np.arange(2 * n), i1] += f
    m.setflags(write=False)
    return m


def upsample_bilinear(x: np.ndarray) -> np.ndarray:
    """Bilinear x2 upsampling over the last two axes."""
    h, w = x.shape[-2:]
    return _up_matrix(h) @ x @ _up_matrix(w).T


def upsample_bilinear_adjoint(g: np.ndarray) -> np.ndarray:
    h, w = g.shape[-2] // 2, g.shape[-1] // 2
    return _up_matrix(h).T @ g @ _up_matrix(w)


def upsample_nearest(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def downsample_depth(depth: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 block average over valid pixels; a block is valid if any pixel is."""
    h, w = depth.shape
    m = mask.astype(np.float64).reshape(h // 2, 2, w // 2, 2).sum(axis=(1, 3))
    s = (depth * mask).reshape(h // 2, 2, w // 2, 2).sum(axis=(1, 3))
    valid = m > 0
    return np.where(valid, s / np.where(valid, m, 1.0), 0.0), valid
