"""Separable Lanczos-3 resampling with edge clamping."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from ..errors import ShapeError

TAPS = 3


def lanczos_kernel(x, a: int = TAPS):
    x = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(x < a, np.sinc(x) * np.sinc(x / a), 0.0)


@lru_cache(maxsize=256)
def _weights(n_in: int, n_out: int, a: int = TAPS) -> np.ndarray:
    """Dense ``(n_out, n_in)`` resampling matrix; every row sums to 1.

    Output sample ``i`` is centred on input coordinate ``(i + 0.5) * n_in / n_out - 0.5``.
    When shrinking, the kernel is stretched by the shrink factor.
    """
    ratio = n_in / n_out
    stretch = max(ratio, 1.0)
    support = a * stretch
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        c = (i + 0.5) * ratio - 0.5
        lo = math.floor(c - support) + 1
        hi = math.ceil(c + support)
        taps = np.arange(lo, hi)
        vals = lanczos_kernel((taps - c) / stretch, a)
        np.add.at(w[i], np.clip(taps, 0, n_in - 1), vals)
        w[i] /= w[i].sum()
    w.setflags(write=False)
    return w


def resample_weights(n_in: int, n_out: int) -> np.ndarray:
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"cannot resample {n_in} samples to {n_out}")
    return _weights(n_in, n_out)


def lanczos3_resize(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resample the two leading axes of ``plane`` to ``(height, width)``."""
    h, w = plane.shape[:2]
    if height < 1 or width < 1:
        raise ShapeError(f"output size {height}x{width} is empty")
    x = np.asarray(plane, dtype=np.float64)
    if (h, w) == (height, width):
        return x.copy()
    wy = resample_weights(h, height)
    wx = resample_weights(w, width)
    out = np.tensordot(wy, x, axes=(1, 0))
    out = np.tensordot(wx, out, axes=(1, 1))
    return np.swapaxes(out, 0, 1)


def scaled_dims(height: int, width: int, scale: float) -> tuple[int, int]:
    return int(round(height / scale)), int(round(width / scale))


def lanczos3_resample(plane: np.ndarray, scale: float) -> np.ndarray:
    """Shrink (``scale > 1``) or enlarge the leading two axes by ``1/scale``.

    Output dims are ``round(dim / scale)``; use :func:`lanczos3_resize` to go
    back to the exact original dims.
    """
    if not scale > 0:
        raise ShapeError(f"scale must be positive, got {scale}")
    h, w = plane.shape[:2]
    oh, ow = scaled_dims(h, w, scale)
    if oh < 1 or ow < 1:
        raise ShapeError(f"scale {scale} shrinks {h}x{w} below one sample")
    return lanczos3_resize(plane, oh, ow)
