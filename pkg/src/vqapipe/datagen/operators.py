"""Distortion operators standing in for real codecs.

An operator maps float samples ``(height, width, 3, frames)`` in integer
sample units to a distorted array of the same shape. Operators take a
severity index; level ``0`` is the mildest.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import fft, ndimage

from ..core import RawFormat, VideoVolume, load_video, max_value, write_video
from ..errors import MetricError, RegistryError
from .resample import lanczos3_resize


@dataclass(frozen=True)
class Operator:
    name: str
    fn: Callable[..., np.ndarray]
    levels: tuple = ()

    def __call__(self, samples: np.ndarray, severity: int, rng: np.random.Generator, bit_depth: int = 8) -> np.ndarray:
        if self.levels and not 0 <= severity < len(self.levels):
            raise RegistryError(f"{self.name}: severity {severity} outside 0..{len(self.levels) - 1}")
        param = self.levels[severity] if self.levels else severity
        return self.fn(np.asarray(samples, dtype=np.float64), param, rng, bit_depth)


def _identity(x, param, rng, bit_depth):
    return x.copy()


def _blur(x, sigma, rng, bit_depth):
    return ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0, 0), mode="nearest")


def _noise(x, sigma, rng, bit_depth):
    # sigma is given on the 8-bit scale
    scale = max_value(bit_depth) / 255.0
    return x + rng.normal(0.0, sigma * scale, size=x.shape)


def _blockquant(x, step, rng, bit_depth, block=8):
    h, w = x.shape[:2]
    ph, pw = -h % block, -w % block
    padded = np.pad(x, ((0, ph), (0, pw), (0, 0), (0, 0)), mode="edge")
    hh, ww = padded.shape[:2]
    blocks = padded.reshape(hh // block, block, ww // block, block, *x.shape[2:])
    coef = fft.dctn(blocks, axes=(1, 3), norm="ortho")
    q = step * max_value(bit_depth) / 255.0
    coef = np.round(coef / q) * q
    out = fft.idctn(coef, axes=(1, 3), norm="ortho").reshape(hh, ww, *x.shape[2:])
    return out[:h, :w]


def _aliasing(x, factor, rng, bit_depth):
    """Decimate by picking the nearest sample (no prefilter), then Lanczos-3 upsample."""
    h, w = x.shape[:2]
    small_h, small_w = max(1, int(round(h / factor))), max(1, int(round(w / factor)))
    rows = np.minimum(np.round((np.arange(small_h) + 0.5) * h / small_h - 0.5).astype(int), h - 1)
    cols = np.minimum(np.round((np.arange(small_w) + 0.5) * w / small_w - 0.5).astype(int), w - 1)
    return lanczos3_resize(x[rows][:, cols], h, w)


class ExternalOperator:
    """Runs an external command on a raw 4:4:4 file.

    ``command`` may use ``{input}``, ``{output}``, ``{width}``, ``{height}``,
    ``{frames}``, ``{bit_depth}`` and ``{param}`` placeholders. The command
    must write a raw file of identical layout to ``{output}``.
    """

    def __init__(self, name: str, command: str | Sequence[str], levels: Sequence = (), timeout: float = 600.0):
        self.name = name
        self.command = command
        self.levels = tuple(levels)
        self.timeout = timeout

    def __call__(self, samples, severity, rng, bit_depth=8):
        param = self.levels[severity] if self.levels else severity
        top = max_value(bit_depth)
        arr = np.clip(np.rint(samples), 0, top).astype(np.uint8 if bit_depth == 8 else np.uint16)
        vol = VideoVolume.from_stacked(arr, bit_depth)
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp) / "in.yuv", Path(tmp) / "out.yuv"
            write_video(src, vol, descriptor=False)
            fields = dict(input=src, output=dst, width=vol.width, height=vol.height,
                          frames=vol.frame_count, bit_depth=bit_depth, param=param)
            argv = _expand(self.command, fields)
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            if proc.returncode != 0 or not dst.exists():
                raise MetricError(f"operator {self.name} failed", _transcript(argv, proc))
            fmt = RawFormat(vol.width, vol.height, bit_depth, "444", vol.frame_count)
            return load_video(dst, fmt).stacked().astype(np.float64)


def _expand(command, fields) -> list[str]:
    parts = shlex.split(command) if isinstance(command, str) else list(command)
    return [p.format(**{k: str(v) for k, v in fields.items()}) for p in parts]


def _transcript(argv, proc) -> str:
    return f"$ {shlex.join(argv)}\n[exit {proc.returncode}]\n--- stdout\n{proc.stdout}\n--- stderr\n{proc.stderr}"


OPERATORS: dict[str, Operator | ExternalOperator] = {
    "identity": Operator("identity", _identity, (0, 0, 0, 0)),
    "blur": Operator("blur", _blur, (0.5, 1.0, 2.0, 4.0)),
    "noise": Operator("noise", _noise, (3.0, 7.0, 14.0, 28.0)),
    "blockquant": Operator("blockquant", _blockquant, (12.0, 30.0, 60.0, 120.0)),
    "aliasing": Operator("aliasing", _aliasing, (1.1, 1.3, 2.0, 4.0)),
}

DEFAULT_OPERATORS = ("blur", "noise", "blockquant", "aliasing")


def register_operator(op, overwrite: bool = False) -> None:
    if op.name in OPERATORS and not overwrite:
        raise RegistryError(f"operator {op.name!r} already registered")
    OPERATORS[op.name] = op


def get_operator(name: str):
    try:
        return OPERATORS[name]
    except KeyError:
        raise RegistryError(f"unknown operator {name!r}; known: {sorted(OPERATORS)}") from None


def operator_from_config(name: str, entry: dict):
    """Build an operator from a config mapping.

    ``{"base": "blur", "levels": [...]}`` re-parameterizes a built-in;
    ``{"command": "...", "levels": [...]}`` wraps an external program.
    """
    levels = tuple(entry.get("levels", ()))
    if "command" in entry:
        return ExternalOperator(name, entry["command"], levels, float(entry.get("timeout", 600.0)))
    base = get_operator(entry.get("base", name))
    if not isinstance(base, Operator):
        raise RegistryError(f"cannot re-parameterize external operator {base.name!r}")
    return Operator(name, base.fn, levels or base.levels)
