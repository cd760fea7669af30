"""Procedural test clips with natural-image-like statistics.

Each clip pans across a canvas made of power-law (1/f) texture, hard-edged
shapes and oriented gratings, so that blur, noise, blocking and aliasing
all have something to act on. Texture richness varies per seed.
"""

from __future__ import annotations

import numpy as np

from ..core import VideoVolume


def _power_law_noise(rng: np.random.Generator, h: int, w: int, beta: float) -> np.ndarray:
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    spectrum = (rng.normal(size=f.shape) + 1j * rng.normal(size=f.shape)) / f ** (beta / 2)
    spectrum[0, 0] = 0.0
    field = np.fft.irfft2(spectrum, s=(h, w))
    return (field - field.mean()) / (field.std() + 1e-12)


def _shapes(rng: np.random.Generator, h: int, w: int, count: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w))
    for _ in range(count):
        level = rng.uniform(-1.5, 1.5)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            r = rng.uniform(8, min(h, w) / 4)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hh, ww = rng.uniform(8, h / 3), rng.uniform(8, w / 3)
            mask = (np.abs(yy - cy) < hh) & (np.abs(xx - cx) < ww)
        out[mask] = level
    return out


def _grating(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 24.0)
    phase = (xx * np.cos(theta) + yy * np.sin(theta)) * 2 * np.pi / period
    envelope = np.exp(-(((yy - rng.uniform(0, h)) / (h / 3)) ** 2 + ((xx - rng.uniform(0, w)) / (w / 3)) ** 2))
    return np.sin(phase) * envelope


def make_source(seed: int, width: int = 512, height: int = 256, frames: int = 24,
                sequence_id: str | None = None, bit_depth: int = 8) -> VideoVolume:
    """Generate one 4:4:4 clip deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    vy, vx = rng.integers(-3, 4, size=2)
    pad = 4 * frames + 8
    ch, cw = height + 2 * pad, width + 2 * pad

    beta = rng.uniform(1.4, 2.6)
    detail = rng.uniform(0.3, 1.0)
    luma = detail * _power_law_noise(rng, ch, cw, beta)
    luma += _shapes(rng, ch, cw, int(rng.integers(3, 12)))
    for _ in range(int(rng.integers(0, 3))):
        luma += rng.uniform(0.3, 1.0) * _grating(rng, ch, cw)
    luma = (luma - luma.min()) / (np.ptp(luma) + 1e-12)
    chroma = [0.5 + 0.12 * _power_law_noise(rng, ch, cw, 3.0) + 0.05 * luma for _ in range(2)]

    top = (1 << bit_depth) - 1
    lo, hi = 16 / 255 * top, 235 / 255 * top
    planes = []
    for k, canvas in enumerate([luma] + chroma):
        scaled = lo + (hi - lo) * np.clip(canvas, 0, 1) if k == 0 else np.clip(canvas, 0, 1) * top
        stack = np.empty((height, width, frames))
        for t in range(frames):
            oy, ox = pad + vy * t, pad + vx * t
            stack[:, :, t] = scaled[oy:oy + height, ox:ox + width]
        planes.append(np.clip(np.rint(stack), 0, top).astype(np.uint8 if bit_depth == 8 else np.uint16))
    return VideoVolume(*planes, bit_depth=bit_depth, chroma_format="444",
                       sequence_id=sequence_id if sequence_id is not None else f"src{seed:04d}")
