"""Sequence scoring: patches through the patch network, then the aggregator."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .core import VideoVolume, _check_patchable, crop_patch, max_value, patch_positions, to_444
from .errors import DataError, ModeError, ShapeError
from .pqanet import PQANet
from .stanet import FEATURE_LEVELS, STANet, aggregate, assemble_feature_tensor, assemble_quality_tensor, grid_from_order


@dataclass
class SequenceInputs:
    """Per-patch network outputs of one sequence, arranged on its patch grid."""

    sequence_id: str
    dims: tuple[int, int, int]
    scores: np.ndarray    # (n_x, n_y, n_t)
    features: np.ndarray  # (n_x, n_y, n_t, C)
    positions: list[tuple[int, int, int]] = field(default_factory=list)

    def quality_tensor(self):
        return assemble_quality_tensor(self.scores)

    def feature_tensor(self):
        return assemble_feature_tensor(self.features)


@dataclass
class SequenceScore:
    sequence_id: str
    score: float
    patch_scores: list[tuple[int, int, int, float]] = field(default_factory=list)


def _patch_block(video: VideoVolume, pos) -> np.ndarray:
    return crop_patch(video, *pos).transpose(3, 2, 0, 1).astype(np.float32) / np.float32(max_value(video.bit_depth))


@torch.no_grad()
def sequence_inputs(model: PQANet, dist: VideoVolume, ref: VideoVolume | None = None,
                    batch_size: int = 4) -> SequenceInputs:
    """Score every patch of ``dist`` and pool its level-3 and level-6 features."""
    if model.mode == "FR" and ref is None:
        raise ModeError("FR scoring requires a reference sequence")
    if model.mode == "NR" and ref is not None:
        raise ModeError("NR scoring does not take a reference sequence")
    dist = to_444(dist)
    dims = _check_patchable(dist)
    if ref is not None:
        ref = to_444(ref)
        if (ref.width, ref.height, ref.frame_count) != (dist.width, dist.height, dist.frame_count):
            raise ShapeError(f"reference {ref.width}x{ref.height}x{ref.frame_count} does not match "
                             f"distorted {dist.width}x{dist.height}x{dist.frame_count}")
        if ref.bit_depth != dist.bit_depth:
            raise DataError("reference and distorted bit depths differ")
    model.eval()
    dtype = next(model.parameters()).dtype
    positions = list(patch_positions(dims))
    scores, feats = [], []
    for s in range(0, len(positions), batch_size):
        chunk = positions[s:s + batch_size]
        d = torch.from_numpy(np.stack([_patch_block(dist, p) for p in chunk])).to(dtype)
        r = None if ref is None else torch.from_numpy(np.stack([_patch_block(ref, p) for p in chunk])).to(dtype)
        out = model(d, r, dist.bit_depth, pool_levels=FEATURE_LEVELS)
        scores.append(out.score.double().numpy())
        feats.append(torch.cat([out.pooled[k] for k in FEATURE_LEVELS], dim=1).double().numpy())
    scores = np.concatenate(scores)
    feats = np.concatenate(feats)
    return SequenceInputs(dist.sequence_id, dims, grid_from_order(scores, dims), grid_from_order(feats, dims), positions)


def score_sequence(dist: VideoVolume, pqa: PQANet, sta: STANet, ref: VideoVolume | None = None,
                   batch_size: int = 4) -> SequenceScore:
    inputs = sequence_inputs(pqa, dist, ref, batch_size)
    value = aggregate(inputs.quality_tensor(), inputs.feature_tensor(), sta)
    flat = [float(v) for v in inputs.scores.transpose(2, 1, 0).reshape(-1)]
    return SequenceScore(inputs.sequence_id, value, [(*p, v) for p, v in zip(inputs.positions, flat)])


def write_scores(path: str | Path, scores: Iterable[SequenceScore]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence_id", "score"])
        for s in scores:
            w.writerow([s.sequence_id, repr(float(s.score))])


def write_patch_scores(path: str | Path, scores: Iterable[SequenceScore]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence_id", "x", "y", "t", "score"])
        for s in scores:
            for x, y, t, v in s.patch_scores:
                w.writerow([s.sequence_id, x, y, t, repr(float(v))])


def read_scores(path: str | Path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["sequence_id"]: float(row["score"]) for row in csv.DictReader(fh)}
