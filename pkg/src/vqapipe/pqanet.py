"""Patch quality network.

A six-level convolutional pyramid extracts per-frame features from the
distorted patch (and, in full-reference mode, from the reference and the
residual patch). At every level the twelve frames are stacked along the
channel axis, channel-normalized, embedded to 32 dimensions, passed through
one windowed self-attention block and reduced to a scalar. The patch score
is the mean of the six level scores.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import PATCH_FRAMES, PATCH_SIZE, RESIDUAL_EPS, PatchDodecuplet, max_value
from .errors import ConfigurationError, ModeError, ShapeError

FULL_CHANNELS = (16, 32, 48, 64, 96, 128)
NORM_EPS = 1e-10
MODES = ("FR", "NR")


@dataclass(frozen=True)
class PQAConfig:
    mode: str = "FR"
    channels: tuple[int, ...] = FULL_CHANNELS
    embed_dim: int = 32
    window: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    frames: int = PATCH_FRAMES
    slope: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be FR or NR, got {self.mode!r}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 6:
            raise ConfigurationError("the pyramid has exactly six levels")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigurationError(f"channel schedule {self.channels} must be strictly increasing")
        if self.embed_dim % self.heads:
            raise ConfigurationError("embed_dim must be divisible by heads")

    @classmethod
    def full(cls, mode: str = "FR") -> "PQAConfig":
        return cls(mode=mode)

    @classmethod
    def tiny(cls, mode: str = "FR") -> "PQAConfig":
        """Desk-scale profile: a quarter of the channels and 2x2 windows."""
        return cls(mode=mode, channels=tuple(c // 4 for c in FULL_CHANNELS), window=2)

    @classmethod
    def profile(cls, name: str, mode: str = "FR") -> "PQAConfig":
        if name == "full":
            return cls.full(mode)
        if name == "tiny":
            return cls.tiny(mode)
        raise ConfigurationError(f"unknown network profile {name!r}")

    @property
    def streams(self) -> int:
        return 3 if self.mode == "FR" else 1

    def level_sides(self, patch_size: int = PATCH_SIZE) -> list[int]:
        return [patch_size >> (k + 1) for k in range(6)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def channel_normalize(x: torch.Tensor, dim: int = 1, eps: float = NORM_EPS) -> torch.Tensor:
    """Scale every channel vector to unit Euclidean norm.

    Vectors with norm below ``eps`` are divided by ``eps`` instead, so the
    zero vector stays zero.
    """
    norm = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
    return x / norm.clamp_min(eps)


def residual_map(ref: torch.Tensor, dist: torch.Tensor, bit_depth: int = 8, eps: float = RESIDUAL_EPS) -> torch.Tensor:
    """Tensor version of :func:`vqapipe.core.compute_residual` on normalized inputs."""
    m = float(max_value(bit_depth))
    d = torch.round((ref - dist) * m)
    return torch.log(1.0 / (d * d + eps / (m * m))) / math.log(m * m / eps)


class FeatureExtractor(nn.Module):
    """Six levels of (3x3 conv, 3x3 stride-2 conv), leaky rectification after each."""

    def __init__(self, channels=FULL_CHANNELS, slope: float = 0.1, in_channels: int = 3):
        super().__init__()
        self.slope = slope
        levels = []
        c_in = in_channels
        for c in channels:
            levels.append(nn.ModuleList([
                nn.Conv2d(c_in, c, 3, stride=1, padding=1),
                nn.Conv2d(c, c, 3, stride=2, padding=1),
            ]))
            c_in = c
        self.levels = nn.ModuleList(levels)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        outs = []
        for conv_a, conv_b in self.levels:
            x = F.leaky_relu(conv_a(x), self.slope, inplace=True)
            x = F.leaky_relu(conv_b(x), self.slope, inplace=True)
            outs.append(x)
        return outs


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping windows, with a
    learned relative position bias."""

    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.window = window
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))

        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
        index = rel[..., 0] * (2 * window - 1) + rel[..., 1]
        self.register_buffer("relative_position_index", index, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (windows, tokens, dim)
        n_win, n_tok, dim = x.shape
        qkv = self.qkv(x).reshape(n_win, n_tok, 3, self.heads, dim // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        attn = attn + bias.reshape(n_tok, n_tok, -1).permute(2, 0, 1).unsqueeze(0)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n_win, n_tok, dim)
        return self.proj(out)


class SwinBlock(nn.Module):
    """Pre-norm windowed-attention transformer block (no window shift)."""

    def __init__(self, dim: int, window: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (batch, height, width, dim)
        b, h, w, d = x.shape
        ws = self.window
        shortcut = x
        x = self.norm1(x)
        x = x.reshape(b, h // ws, ws, w // ws, ws, d).permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, d)
        x = self.attn(x)
        x = x.reshape(b, h // ws, w // ws, ws, ws, d).permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, d)
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class STLevel(nn.Module):
    """Spatio-temporal scoring head for one pyramid level."""

    def __init__(self, in_features: int, side: int, cfg: PQAConfig):
        super().__init__()
        self.embed = nn.Linear(in_features, cfg.embed_dim)
        self.block = SwinBlock(cfg.embed_dim, min(cfg.window, side), cfg.heads, cfg.mlp_ratio)
        self.head = nn.Linear(cfg.embed_dim, 1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # tokens: (batch, height, width, features)
        x = self.block(self.embed(tokens))
        return self.head(x.mean(dim=(1, 2))).squeeze(-1)


def level_tokens(dist: torch.Tensor, res: torch.Tensor | None = None, ref: torch.Tensor | None = None) -> torch.Tensor:
    """Build the embedding input of one level.

    Each argument is ``(batch, frames, channels, h, w)``. Features are
    normalized per frame over channels and the frames are stacked along the
    channel axis. With a residual stream the input becomes
    ``[D, res, R] * res``, the residual block broadcast over each of the
    three groups. Returns ``(batch, h, w, features)``.
    """
    def stack(f):
        n = channel_normalize(f, dim=2)
        b, t, c, h, w = n.shape
        return n.permute(0, 3, 4, 1, 2).reshape(b, h, w, t * c)

    d = stack(dist)
    if res is None and ref is None:
        return d
    if res is None or ref is None:
        raise ModeError("full-reference scoring needs both residual and reference features")
    r = stack(res)
    cat = torch.cat([d, r, stack(ref)], dim=-1)
    return cat * r.repeat(1, 1, 1, 3)


@dataclass
class FeaturePyramid:
    """Per-frame feature maps of one patch; level ``k`` is ``(frames, C_k, s_k, s_k)``."""

    levels: list[torch.Tensor]

    def __post_init__(self):
        if len(self.levels) != 6:
            raise ShapeError(f"a pyramid has 6 levels, got {len(self.levels)}")

    def level(self, k: int) -> torch.Tensor:
        """1-based level access."""
        return self.levels[k - 1]


@dataclass
class PatchScore:
    value: float
    origin: tuple = ()
    level_scores: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite patch score {self.value}")


@dataclass
class PatchOutput:
    """Batched network output: scores plus pooled distorted-stream features."""

    score: torch.Tensor
    level_scores: torch.Tensor
    pooled: dict[int, torch.Tensor] = field(default_factory=dict)


class PQANet(nn.Module):
    def __init__(self, cfg: PQAConfig | None = None):
        super().__init__()
        self.cfg = cfg or PQAConfig()
        self.fe = FeatureExtractor(self.cfg.channels, self.cfg.slope)
        sides = self.cfg.level_sides()
        self.st = nn.ModuleList(
            STLevel(self.cfg.streams * self.cfg.frames * c, s, self.cfg) for c, s in zip(self.cfg.channels, sides)
        )
        self.reset_parameters()
        self.to(memory_format=torch.channels_last)

    @property
    def mode(self) -> str:
        return self.cfg.mode

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=self.cfg.slope, nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, WindowAttention):
                nn.init.trunc_normal_(m.relative_position_bias_table, std=0.02)

    def pyramid(self, frames: torch.Tensor) -> list[torch.Tensor]:
        """Features of ``(batch, frames, 3, H, W)`` input as ``(batch, frames, C_k, h, w)`` tensors."""
        b, t = frames.shape[:2]
        x = frames.reshape(b * t, *frames.shape[2:]).contiguous(memory_format=torch.channels_last)
        return [f.reshape(b, t, *f.shape[1:]) for f in self.fe(x)]

    def forward(self, dist: torch.Tensor, ref: torch.Tensor | None = None, bit_depth: int = 8,
                pool_levels: tuple[int, ...] = ()) -> PatchOutput:
        """Score a batch of patches.

        ``dist`` and ``ref`` are ``(batch, frames, 3, H, W)`` in [0, 1].
        ``pool_levels`` lists 1-based levels whose distorted-stream features
        are returned spatially and temporally averaged.
        """
        if dist.ndim != 5 or dist.shape[1] != self.cfg.frames or dist.shape[2] != 3:
            raise ShapeError(f"expected (batch, {self.cfg.frames}, 3, H, W), got {tuple(dist.shape)}")
        b = dist.shape[0]
        if self.mode == "FR":
            if ref is None:
                raise ModeError("FR mode requires reference patches")
            if ref.shape != dist.shape:
                raise ShapeError(f"reference {tuple(ref.shape)} and distorted {tuple(dist.shape)} differ")
            res = residual_map(ref, dist, bit_depth).to(dist.dtype)
            feats = self.pyramid(torch.cat([dist, res, ref], dim=0))
            split = [(f[:b], f[b:2 * b], f[2 * b:]) for f in feats]
        else:
            if ref is not None:
                raise ModeError("NR mode does not take reference patches")
            split = [(f, None, None) for f in self.pyramid(dist)]

        level_scores = torch.stack(
            [st(level_tokens(*streams)) for st, streams in zip(self.st, split)], dim=1
        )
        pooled = {k: split[k - 1][0].mean(dim=(1, 3, 4)) for k in pool_levels}
        return PatchOutput(level_scores.mean(dim=1), level_scores, pooled)


def patch_tensor(patch: PatchDodecuplet | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(256, 256, 3, 12)`` samples to a ``(1, 12, 3, 256, 256)`` tensor."""
    samples = patch.samples if isinstance(patch, PatchDodecuplet) else patch
    return torch.from_numpy(np.ascontiguousarray(np.asarray(samples).transpose(3, 2, 0, 1))).to(dtype).unsqueeze(0)


def _param_dtype(model: nn.Module):
    return next(model.parameters()).dtype


@torch.no_grad()
def extract_pyramid(patch: PatchDodecuplet, model: PQANet) -> FeaturePyramid:
    x = patch_tensor(patch, _param_dtype(model))
    return FeaturePyramid([f[0] for f in model.pyramid(x)])


def st_level_score(level_features: dict, model: PQANet, level: int) -> float:
    """Score one level from its feature maps.

    ``level_features`` maps ``"dist"`` (and ``"res"``, ``"ref"`` in FR mode)
    to ``(frames, C, h, w)`` tensors.
    """
    if not 1 <= level <= 6:
        raise ShapeError(f"level must be in 1..6, got {level}")
    d = level_features["dist"].unsqueeze(0)
    if model.mode == "FR":
        if "res" not in level_features or "ref" not in level_features:
            raise ModeError("FR mode needs residual and reference features")
        tokens = level_tokens(d, level_features["res"].unsqueeze(0), level_features["ref"].unsqueeze(0))
    else:
        tokens = level_tokens(d)
    with torch.no_grad():
        return float(model.st[level - 1](tokens)[0])


@torch.no_grad()
def patch_score(dist: PatchDodecuplet, model: PQANet, ref: PatchDodecuplet | None = None) -> PatchScore:
    dtype = _param_dtype(model)
    out = model(patch_tensor(dist, dtype), None if ref is None else patch_tensor(ref, dtype), dist.bit_depth)
    return PatchScore(float(out.score[0]), dist.origin, [float(s) for s in out.level_scores[0]])


def mean_level_score(level_scores) -> float:
    scores = [float(s) for s in level_scores]
    if len(scores) != 6:
        raise ShapeError(f"expected six level scores, got {len(scores)}")
    return sum(scores) / 6.0


def compile_levels(model: PQANet) -> PQANet:
    """Compile the per-level scoring heads in place.

    Only the transformer heads gain from compilation on CPU; the shared
    convolutional pyramid runs slower compiled, so it is left eager.
    Parameter names are unchanged, so checkpoints stay interchangeable.
    """
    for st in model.st:
        st.forward = torch.compile(st.forward, dynamic=False)
    return model
