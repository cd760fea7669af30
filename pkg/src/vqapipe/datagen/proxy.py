"""Proxy quality labels for training patches.

The default labeler is a three-scale structural-similarity score on luma,
averaged over frames and mapped onto [0, 100]. Any callable
``metric(dist, ref) -> float`` can be registered in its place, including an
external program that prints one number.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from ..core import PatchDodecuplet, VideoVolume, denormalize, write_video
from ..errors import MetricError, RegistryError, ShapeError

# Wang et al. five-scale exponents truncated to the three finest scales and renormalized.
_MS_WEIGHTS = np.array([0.0448, 0.2856, 0.3001])
MS_WEIGHTS = _MS_WEIGHTS / _MS_WEIGHTS.sum()


def _ssim_terms(x: np.ndarray, y: np.ndarray, sigma: float = 1.5, data_range: float = 1.0):
    """Per-frame mean luminance and contrast-structure terms for ``(h, w, frames)`` stacks."""
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    blur = lambda a: ndimage.gaussian_filter(a, sigma=(sigma, sigma, 0), mode="reflect", truncate=3.5)
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum.mean(axis=(0, 1)), cs.mean(axis=(0, 1))


def _halve(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
    a = a[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def ms_ssim_frames(dist: np.ndarray, ref: np.ndarray, scales: int = 3) -> np.ndarray:
    """Multi-scale SSIM of each frame of two ``(h, w, frames)`` luma stacks in [0, 1]."""
    x, y = np.asarray(dist, np.float64), np.asarray(ref, np.float64)
    weights = MS_WEIGHTS if scales == 3 else np.full(scales, 1.0 / scales)
    value = np.ones(x.shape[2])
    for s in range(scales):
        lum, cs = _ssim_terms(x, y)
        cs = np.clip(cs, 0.0, 1.0)
        value *= cs ** weights[s]
        if s == scales - 1:
            value *= np.clip(lum, 0.0, 1.0) ** weights[s]
        else:
            x, y = _halve(x), _halve(y)
    return value


@dataclass
class MSSSIMProxy:
    """``100 * mean_frame_msssim ** gamma`` on the luma channel.

    ``gamma`` stretches the top of the scale so that typical distortion
    ladders span a usable range of labels; the map is monotone and equals
    100 only for perfect fidelity.
    """

    gamma: float = 6.0
    scales: int = 3

    def score_samples(self, dist: np.ndarray, ref: np.ndarray) -> float:
        """Score two ``(h, w, 3, frames)`` arrays normalized to [0, 1]."""
        if dist.shape != ref.shape:
            raise ShapeError(f"proxy inputs differ in shape: {dist.shape} vs {ref.shape}")
        if np.array_equal(dist, ref):
            return 100.0
        ms = float(np.mean(ms_ssim_frames(dist[:, :, 0], ref[:, :, 0], self.scales)))
        return float(100.0 * np.clip(ms, 0.0, 1.0) ** self.gamma)

    def __call__(self, dist: PatchDodecuplet, ref: PatchDodecuplet) -> float:
        return self.score_samples(dist.samples, ref.samples)


class ExternalCommandMetric:
    """Score patches with an external program.

    Both patches are written as raw 4:4:4 files (with JSON sidecars); the
    command receives the two paths, through ``{dist}``/``{ref}`` placeholders
    or appended in that order, and must print a decimal score as the last
    line of standard output.
    """

    def __init__(self, command: str | Sequence[str], timeout: float = 300.0):
        self.command = command
        self.timeout = timeout

    def _argv(self, dist_path: Path, ref_path: Path) -> list[str]:
        parts = shlex.split(self.command) if isinstance(self.command, str) else list(self.command)
        if any("{dist}" in p or "{ref}" in p for p in parts):
            return [p.format(dist=dist_path, ref=ref_path) for p in parts]
        return parts + [str(dist_path), str(ref_path)]

    def __call__(self, dist: PatchDodecuplet, ref: PatchDodecuplet) -> float:
        with tempfile.TemporaryDirectory() as tmp:
            paths = []
            for name, patch in (("dist", dist), ("ref", ref)):
                ints = denormalize(patch.samples, patch.bit_depth)
                dtype = np.uint8 if patch.bit_depth == 8 else np.uint16
                vol = VideoVolume.from_stacked(ints.astype(dtype), patch.bit_depth, name)
                path = Path(tmp) / f"{name}.yuv"
                write_video(path, vol)
                paths.append(path)
            argv = self._argv(*paths)
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise MetricError(f"metric command failed to run: {exc}", f"$ {shlex.join(argv)}\n{exc}") from exc
        transcript = f"$ {shlex.join(argv)}\n[exit {proc.returncode}]\n--- stdout\n{proc.stdout}\n--- stderr\n{proc.stderr}"
        if proc.returncode != 0:
            raise MetricError(f"metric command exited with status {proc.returncode}", transcript)
        lines = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
        try:
            return float(lines[-1])
        except (IndexError, ValueError):
            raise MetricError("metric command did not print a score", transcript) from None


METRICS: dict[str, Callable] = {"msssim": MSSSIMProxy()}


def register_metric(name: str, metric: Callable, overwrite: bool = False) -> None:
    if name in METRICS and not overwrite:
        raise RegistryError(f"metric {name!r} already registered")
    METRICS[name] = metric


def get_metric(name: str) -> Callable:
    try:
        return METRICS[name]
    except KeyError:
        raise RegistryError(f"unknown proxy metric {name!r}; known: {sorted(METRICS)}") from None


def proxy_metric(dist: PatchDodecuplet, ref: PatchDodecuplet, metric: str | Callable = "msssim") -> float:
    fn = get_metric(metric) if isinstance(metric, str) else metric
    if dist.samples.shape != ref.samples.shape:
        raise ShapeError("proxy metric inputs must share a shape")
    return float(fn(dist, ref))
