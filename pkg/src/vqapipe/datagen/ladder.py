"""Distortion ladders: downscale, distort at each severity, upscale back."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from ..core import VideoVolume, max_value, to_444
from ..errors import ConfigurationError
from .operators import DEFAULT_OPERATORS, get_operator
from .resample import lanczos3_resample, lanczos3_resize


@dataclass(frozen=True)
class LadderSpec:
    scales: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0)
    operators: tuple[str, ...] = DEFAULT_OPERATORS
    severities: int = 4

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "operators", tuple(self.operators))
        if not self.scales or any(s < 1 for s in self.scales):
            raise ConfigurationError(f"scale factors must be >= 1, got {self.scales}")
        if self.severities < 1:
            raise ConfigurationError("a ladder needs at least one severity level")
        if not self.operators:
            raise ConfigurationError("a ladder needs at least one operator")

    @property
    def versions_per_operator(self) -> int:
        return len(self.scales) * self.severities


@dataclass
class DistortedVersion:
    volume: VideoVolume
    source_id: str
    operator: str
    severity: int
    scale: float

    @property
    def version_id(self) -> str:
        return self.volume.sequence_id


def _seed_for(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode())


def _to_ints(x: np.ndarray, bit_depth: int) -> np.ndarray:
    return np.clip(np.rint(x), 0, max_value(bit_depth))


def build_ladder(src: VideoVolume, spec: LadderSpec | None = None, seed: int = 0) -> list[DistortedVersion]:
    """All distorted versions of ``src``, ordered by scale, operator, severity.

    Every version is rounded to integer samples at the reduced resolution
    (as a decoder would emit) and again after upscaling.
    """
    spec = spec or LadderSpec()
    ops = [get_operator(name) for name in spec.operators]
    src = to_444(src)
    base = src.stacked().astype(np.float64)
    h, w = src.height, src.width
    dtype = src.y.dtype
    out = []
    for scale in spec.scales:
        low = base if scale == 1.0 else _to_ints(lanczos3_resample(base, scale), src.bit_depth)
        for op in ops:
            for sev in range(spec.severities):
                rng = np.random.default_rng(_seed_for(seed, src.sequence_id, scale, op.name, sev))
                dist = _to_ints(op(low, sev, rng, src.bit_depth), src.bit_depth)
                if scale != 1.0:
                    dist = _to_ints(lanczos3_resize(dist, h, w), src.bit_depth)
                vid = f"{src.sequence_id}__{op.name}_q{sev}_x{scale:g}"
                vol = VideoVolume.from_stacked(dist.astype(dtype), src.bit_depth, vid)
                out.append(DistortedVersion(vol, src.sequence_id, op.name, sev, scale))
    return out
