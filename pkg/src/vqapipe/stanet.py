"""Spatio-temporal aggregation of patch scores into a sequence score.

Patch scores are arranged on their ``(x, y, t)`` grid and resampled to a
fixed ``16 x 9 x 10`` tensor by area-weighted local means. Pooled level-3
and level-6 distorted-stream features go through the same resampling and
feed two 3-D convolution blocks; a softmax over all cells of their output
weights the quality tensor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ShapeError

GRID = (16, 9, 10)
FEATURE_LEVELS = (3, 6)


@lru_cache(maxsize=128)
def area_weights(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` matrix of fractional overlaps, rows summing to 1.

    Target cell ``i`` spans ``[i, i + 1) * n_in / n_out`` in source units;
    each source cell contributes the share of that span it covers.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"cannot resample {n_in} cells to {n_out}")
    width = Fraction(n_in, n_out)
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * width, (i + 1) * width
        for j in range(int(lo), min(n_in, int(np.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                w[i, j] = float(overlap / width)
    w.setflags(write=False)
    return w


def area_resample(values: np.ndarray, target: Sequence[int] = GRID) -> np.ndarray:
    """Resample the leading three axes of ``values`` to ``target``; trailing axes ride along."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim < 3 or arr.size == 0:
        raise ShapeError(f"need a non-empty (n_x, n_y, n_t, ...) grid, got shape {arr.shape}")
    for axis, n_out in enumerate(target):
        arr = np.moveaxis(np.tensordot(area_weights(arr.shape[axis], n_out), arr, axes=(1, axis)), 0, axis)
    return arr


@dataclass
class QualityTensor:
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != GRID:
            raise ShapeError(f"quality tensor must be {GRID}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("quality tensor has non-finite entries")


@dataclass
class FeatureTensorStack:
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[:3] != GRID:
            raise ShapeError(f"feature stack must be {GRID} x C, got {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[3]


def grid_from_order(values: Sequence, dims: tuple[int, int, int]) -> np.ndarray:
    """Arrange per-patch values given in grid order (t, then y, then x) as ``[x, y, t, ...]``."""
    n_x, n_y, n_t = dims
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape[0] != n_x * n_y * n_t:
        raise ShapeError(f"{arr.shape[0]} values for grid {dims}")
    return np.moveaxis(arr.reshape(n_t, n_y, n_x, *arr.shape[1:]), (0, 1, 2), (2, 1, 0))


def assemble_quality_tensor(scores: np.ndarray) -> QualityTensor:
    """``scores`` is the ``(n_x, n_y, n_t)`` patch-score grid."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3 or scores.size == 0:
        raise ShapeError(f"patch-score grid must be non-empty 3-D, got {scores.shape}")
    return QualityTensor(area_resample(scores))


def pool_pyramid(pyramid, levels: Sequence[int] = FEATURE_LEVELS) -> np.ndarray:
    """Average the chosen levels of a pyramid over frames and space and concatenate."""
    vecs = []
    for k in levels:
        try:
            feat = pyramid.level(k)
        except (IndexError, AttributeError) as exc:
            raise ShapeError(f"pyramid lacks level {k}") from exc
        vecs.append(torch.as_tensor(feat).double().mean(dim=(0, 2, 3)).numpy())
    return np.concatenate(vecs)


def assemble_feature_tensor(pooled, dims: tuple[int, int, int] | None = None) -> FeatureTensorStack:
    """Build the feature stack from per-patch data.

    ``pooled`` is either a ``(n_x, n_y, n_t, C)`` array of pooled vectors, or
    a sequence of pyramids in grid order together with ``dims``.
    """
    if dims is not None:
        vectors = [pool_pyramid(p) for p in pooled]
        arr = grid_from_order(np.stack(vectors), dims)
    else:
        arr = np.asarray(pooled, dtype=np.float64)
    if arr.ndim != 4 or arr.size == 0:
        raise ShapeError(f"expected (n_x, n_y, n_t, C) features, got {arr.shape}")
    return FeatureTensorStack(area_resample(arr))


@dataclass(frozen=True)
class STAConfig:
    in_channels: int = 48 + 128
    width: int = 8
    grid: tuple[int, int, int] = GRID
    slope: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))

    @classmethod
    def for_channels(cls, channels: Sequence[int]) -> "STAConfig":
        """Config matching a patch-network channel schedule."""
        return cls(in_channels=sum(channels[k - 1] for k in FEATURE_LEVELS))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


class STANet(nn.Module):
    def __init__(self, cfg: STAConfig | None = None):
        super().__init__()
        self.cfg = cfg or STAConfig()
        w = self.cfg.width
        self.block1 = nn.ModuleList([nn.Conv3d(self.cfg.in_channels, w, 3, padding=1), nn.Conv3d(w, w, 3, padding=1)])
        self.block2 = nn.ModuleList([nn.Conv3d(w, w, 3, padding=1), nn.Conv3d(w, w, 3, padding=1)])
        self.project = nn.Conv3d(w, 1, 1)

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        """``(batch, X, Y, T, C)`` features to ``(batch, X, Y, T)`` weight logits."""
        x = features.permute(0, 4, 1, 2, 3)
        for conv in (*self.block1, *self.block2):
            x = F.leaky_relu(conv(x), self.cfg.slope)
        return self.project(x).squeeze(1)

    def weights(self, features: torch.Tensor) -> torch.Tensor:
        z = self.logits(features)
        return torch.softmax(z.flatten(1), dim=1).reshape(z.shape)

    def forward(self, quality: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        if quality.shape[1:] != self.cfg.grid:
            raise ShapeError(f"quality tensor grid {tuple(quality.shape[1:])} != {self.cfg.grid}")
        if features.shape[1:4] != self.cfg.grid or features.shape[4] != self.cfg.in_channels:
            raise ShapeError(f"feature tensor {tuple(features.shape[1:])} does not match config")
        w = self.weights(features)
        return (w * quality).flatten(1).sum(dim=1)


def _as_batch(q, f, dtype):
    qv = q.values if isinstance(q, QualityTensor) else np.asarray(q)
    fv = f.values if isinstance(f, FeatureTensorStack) else np.asarray(f)
    if not (np.all(np.isfinite(qv)) and np.all(np.isfinite(fv))):
        raise NumericError("aggregation inputs contain non-finite values")
    return torch.as_tensor(qv, dtype=dtype)[None], torch.as_tensor(fv, dtype=dtype)[None]


@torch.no_grad()
def aggregate(q, f, model: STANet) -> float:
    """Sequence score: softmax-weighted sum of the quality tensor."""
    dtype = next(model.parameters()).dtype
    qt, ft = _as_batch(q, f, dtype)
    out = float(model(qt, ft)[0])
    if not np.isfinite(out):
        raise NumericError("aggregation produced a non-finite score")
    return out


@torch.no_grad()
def aggregation_weights(f, model: STANet) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    fv = f.values if isinstance(f, FeatureTensorStack) else np.asarray(f)
    return model.weights(torch.as_tensor(fv, dtype=dtype)[None])[0].numpy()
