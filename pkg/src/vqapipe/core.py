"""Video volumes, raw-plane ingestion, 4:4:4 conversion, patch extraction
and the residual-patch transform."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

from .errors import ConfigurationError, IngestionError, ShapeError

PATCH_SIZE = 256
PATCH_FRAMES = 12
RESIDUAL_EPS = 1.0  # the error floor constant of the residual map

CHROMA_FORMATS = ("420", "444")
BIT_DEPTHS = (8, 10)


def max_value(bit_depth: int) -> int:
    return (1 << bit_depth) - 1


@dataclass(frozen=True)
class RawFormat:
    """Layout of a headerless planar YCbCr file."""

    width: int
    height: int
    bit_depth: int = 8
    chroma_format: str = "420"
    frames: int | None = None

    def __post_init__(self):
        if self.bit_depth not in BIT_DEPTHS:
            raise ConfigurationError(f"unsupported bit depth {self.bit_depth}; expected one of {BIT_DEPTHS}")
        if str(self.chroma_format) not in CHROMA_FORMATS:
            raise ConfigurationError(f"unsupported chroma format {self.chroma_format!r}")
        object.__setattr__(self, "chroma_format", str(self.chroma_format))
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("width and height must be positive")
        if self.chroma_format == "420" and (self.width % 2 or self.height % 2):
            raise ConfigurationError("4:2:0 requires even width and height")

    @property
    def bytes_per_sample(self) -> int:
        return 1 if self.bit_depth == 8 else 2

    @property
    def chroma_shape(self) -> tuple[int, int]:
        if self.chroma_format == "420":
            return self.height // 2, self.width // 2
        return self.height, self.width

    @property
    def frame_samples(self) -> int:
        ch, cw = self.chroma_shape
        return self.width * self.height + 2 * ch * cw

    @property
    def frame_bytes(self) -> int:
        return self.frame_samples * self.bytes_per_sample

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "bit_depth": self.bit_depth,
            "chroma_format": self.chroma_format,
            "frames": self.frames,
        }


def read_descriptor(path: str | Path) -> RawFormat:
    """Parse a sidecar descriptor (YAML or JSON mapping)."""
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigurationError(f"descriptor {path} is not a mapping")
    known = {"width", "height", "bit_depth", "chroma_format", "frames"}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"descriptor {path} has unknown keys {sorted(unknown)}")
    try:
        return RawFormat(**data)
    except TypeError as exc:
        raise ConfigurationError(f"descriptor {path}: {exc}") from exc


def write_descriptor(path: str | Path, fmt: RawFormat) -> None:
    Path(path).write_text(json.dumps(fmt.to_dict(), indent=2) + "\n")


def sidecar_path(path: str | Path) -> Path:
    """Descriptor location for a raw file: ``clip.yuv`` -> ``clip.yuv.json``.

    A ``.yaml`` sidecar is used when no JSON one exists.
    """
    p = Path(path)
    for suffix in (".json", ".yaml", ".yml"):
        cand = p.with_name(p.name + suffix)
        if cand.exists():
            return cand
    return p.with_name(p.name + ".json")


@dataclass
class VideoVolume:
    """Decoded planar YCbCr clip. Planes are indexed ``[row, column, frame]``."""

    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray
    bit_depth: int = 8
    chroma_format: str = "444"
    sequence_id: str = ""

    def __post_init__(self):
        if self.bit_depth not in BIT_DEPTHS:
            raise ConfigurationError(f"unsupported bit depth {self.bit_depth}")
        if self.chroma_format not in CHROMA_FORMATS:
            raise ConfigurationError(f"unsupported chroma format {self.chroma_format!r}")
        if self.y.ndim != 3:
            raise ShapeError(f"luma plane must be 3-D (height, width, frames), got {self.y.shape}")
        h, w, t = self.y.shape
        if h == 0 or w == 0 or t == 0:
            raise ShapeError(f"empty volume {self.y.shape}")
        if self.chroma_format == "420":
            if h % 2 or w % 2:
                raise ShapeError("4:2:0 volumes need even width and height")
            expected = (h // 2, w // 2, t)
        else:
            expected = (h, w, t)
        for name, plane in (("cb", self.cb), ("cr", self.cr)):
            if plane.shape != expected:
                raise ShapeError(f"{name} plane shape {plane.shape} != expected {expected}")
        top = max_value(self.bit_depth)
        for plane in self.planes:
            if plane.size and (plane.min() < 0 or plane.max() > top):
                raise ShapeError(f"sample values outside [0, {top}]")

    @property
    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.y, self.cb, self.cr

    @property
    def height(self) -> int:
        return self.y.shape[0]

    @property
    def width(self) -> int:
        return self.y.shape[1]

    @property
    def frame_count(self) -> int:
        return self.y.shape[2]

    @property
    def raw_format(self) -> RawFormat:
        return RawFormat(self.width, self.height, self.bit_depth, self.chroma_format, self.frame_count)

    def stacked(self) -> np.ndarray:
        """All three planes as one ``(height, width, 3, frames)`` array (4:4:4 only)."""
        if self.chroma_format != "444":
            raise ShapeError("stacked() needs a 4:4:4 volume")
        return np.stack(self.planes, axis=2)

    @classmethod
    def from_stacked(cls, samples: np.ndarray, bit_depth: int = 8, sequence_id: str = "") -> "VideoVolume":
        return cls(samples[:, :, 0], samples[:, :, 1], samples[:, :, 2], bit_depth, "444", sequence_id)


def _sample_dtype(bit_depth: int):
    return np.uint8 if bit_depth == 8 else np.dtype("<u2")


def load_video(path: str | Path, fmt: RawFormat | None = None, sequence_id: str | None = None) -> VideoVolume:
    """Read a headerless planar YCbCr file.

    When ``fmt`` is omitted the sidecar descriptor next to ``path`` is used.
    A descriptor without ``frames`` takes the frame count from the file size.
    10-bit samples are 16-bit little-endian words.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    if fmt is None:
        desc = sidecar_path(path)
        if not desc.exists():
            raise ConfigurationError(f"{path}: no format given and no sidecar descriptor found")
        fmt = read_descriptor(desc)
    actual = path.stat().st_size
    frames = fmt.frames
    if frames is None:
        if actual % fmt.frame_bytes:
            raise IngestionError(
                f"{path}: {actual} bytes is not a whole number of {fmt.frame_bytes}-byte frames"
            )
        frames = actual // fmt.frame_bytes
    expected = frames * fmt.frame_bytes
    if actual != expected:
        raise IngestionError(f"{path}: expected {expected} bytes for {frames} frames, found {actual}")
    if frames == 0:
        raise IngestionError(f"{path}: zero frames")

    raw = np.fromfile(path, dtype=_sample_dtype(fmt.bit_depth)).reshape(frames, fmt.frame_samples)
    ch, cw = fmt.chroma_shape
    n_y = fmt.width * fmt.height
    n_c = ch * cw
    y = raw[:, :n_y].reshape(frames, fmt.height, fmt.width)
    cb = raw[:, n_y:n_y + n_c].reshape(frames, ch, cw)
    cr = raw[:, n_y + n_c:].reshape(frames, ch, cw)
    dtype = np.uint8 if fmt.bit_depth == 8 else np.uint16
    planes = [np.ascontiguousarray(p.transpose(1, 2, 0)).astype(dtype, copy=False) for p in (y, cb, cr)]
    return VideoVolume(*planes, bit_depth=fmt.bit_depth, chroma_format=fmt.chroma_format,
                       sequence_id=sequence_id if sequence_id is not None else path.stem)


def write_video(path: str | Path, video: VideoVolume, descriptor: bool = True) -> RawFormat:
    """Write ``video`` as planar raw samples (plus a JSON sidecar by default)."""
    path = Path(path)
    dtype = _sample_dtype(video.bit_depth)
    with open(path, "wb") as fh:
        for t in range(video.frame_count):
            for plane in video.planes:
                fh.write(np.ascontiguousarray(plane[:, :, t]).astype(dtype).tobytes())
    fmt = video.raw_format
    if descriptor:
        write_descriptor(path.with_name(path.name + ".json"), fmt)
    return fmt


def _upsample2_bilinear(plane: np.ndarray) -> np.ndarray:
    """Double both spatial dims; chroma sample ``i`` sits on luma sample ``2i``.

    Odd output positions average their two neighbours; the last column/row
    is clamped to the final input sample.
    """
    h, w = plane.shape[:2]
    p = plane.astype(np.float64)
    out = np.empty((2 * h, 2 * w) + p.shape[2:], dtype=np.float64)
    right = np.concatenate([p[:, 1:], p[:, -1:]], axis=1)
    wide = np.empty((h, 2 * w) + p.shape[2:], dtype=np.float64)
    wide[:, 0::2] = p
    wide[:, 1::2] = 0.5 * (p + right)
    below = np.concatenate([wide[1:], wide[-1:]], axis=0)
    out[0::2] = wide
    out[1::2] = 0.5 * (wide + below)
    return out


def to_444(video: VideoVolume) -> VideoVolume:
    """Upsample 4:2:0 chroma to luma resolution (bilinear, co-sited).

    4:4:4 input is returned unchanged.
    """
    if video.chroma_format == "444":
        return video
    dtype = video.y.dtype
    top = max_value(video.bit_depth)
    cb, cr = (
        np.clip(np.rint(_upsample2_bilinear(c)), 0, top).astype(dtype)
        for c in (video.cb, video.cr)
    )
    return VideoVolume(video.y.copy(), cb, cr, video.bit_depth, "444", video.sequence_id)


@dataclass
class PatchDodecuplet:
    """A ``256 x 256 x 3 x 12`` patch (row, column, channel, frame) in [0, 1].

    ``origin`` is ``(sequence_id, x, y, t)`` in pixels/frames.
    """

    samples: np.ndarray
    origin: tuple[str, int, int, int] = ("", 0, 0, 0)
    bit_depth: int = 8

    def __post_init__(self):
        if self.samples.shape != (PATCH_SIZE, PATCH_SIZE, 3, PATCH_FRAMES):
            raise ShapeError(f"dodecuplet shape {self.samples.shape} != (256, 256, 3, 12)")
        _, x, y, t = self.origin
        if x % PATCH_SIZE or y % PATCH_SIZE or t % PATCH_FRAMES:
            raise ShapeError(f"offsets {self.origin[1:]} are not on the patch lattice")


@dataclass
class ResidualPatch:
    samples: np.ndarray
    sources: tuple = ()


@dataclass
class PatchGrid:
    """Patches in time-major, then row-major order: index ``(t * n_y + y) * n_x + x``."""

    dims: tuple[int, int, int]
    patches: list[PatchDodecuplet] = field(default_factory=list)

    def __post_init__(self):
        n_x, n_y, n_t = self.dims
        if len(self.patches) != n_x * n_y * n_t:
            raise ShapeError(f"{len(self.patches)} patches for grid {self.dims}")

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)


def grid_dims(width: int, height: int, frames: int) -> tuple[int, int, int]:
    return width // PATCH_SIZE, height // PATCH_SIZE, frames // PATCH_FRAMES


def _check_patchable(video: VideoVolume) -> tuple[int, int, int]:
    if video.chroma_format != "444":
        raise ShapeError("patch extraction needs a 4:4:4 volume; call to_444 first")
    dims = grid_dims(video.width, video.height, video.frame_count)
    if min(dims) < 1:
        raise ShapeError(
            f"{video.width}x{video.height}x{video.frame_count} is smaller than one "
            f"{PATCH_SIZE}x{PATCH_SIZE}x{PATCH_FRAMES} patch"
        )
    return dims


def patch_positions(dims: tuple[int, int, int]) -> Iterator[tuple[int, int, int]]:
    """Pixel/frame offsets ``(x, y, t)`` in grid order."""
    n_x, n_y, n_t = dims
    for t in range(n_t):
        for y in range(n_y):
            for x in range(n_x):
                yield x * PATCH_SIZE, y * PATCH_SIZE, t * PATCH_FRAMES


def crop_patch(video: VideoVolume, x: int, y: int, t: int) -> np.ndarray:
    """Integer samples of one patch, shape ``(256, 256, 3, 12)``."""
    sl = (slice(y, y + PATCH_SIZE), slice(x, x + PATCH_SIZE), slice(t, t + PATCH_FRAMES))
    return np.stack([p[sl] for p in video.planes], axis=2)


def normalize_samples(samples: np.ndarray, bit_depth: int) -> np.ndarray:
    return samples.astype(np.float32) / np.float32(max_value(bit_depth))


def iter_dodecuplets(video: VideoVolume) -> Iterator[PatchDodecuplet]:
    """Lazily yield the non-overlapping patches of ``video`` in grid order."""
    dims = _check_patchable(video)
    for x, y, t in patch_positions(dims):
        yield PatchDodecuplet(
            normalize_samples(crop_patch(video, x, y, t), video.bit_depth),
            (video.sequence_id, x, y, t),
            video.bit_depth,
        )


def extract_dodecuplets(video: VideoVolume) -> PatchGrid:
    """Segment a 4:4:4 volume into non-overlapping dodecuplets.

    Right, bottom and tail remainders are dropped.
    """
    dims = _check_patchable(video)
    return PatchGrid(dims, list(iter_dodecuplets(video)))


def denormalize(samples: np.ndarray, bit_depth: int) -> np.ndarray:
    """Recover integer sample values from normalized floats."""
    return np.rint(np.asarray(samples, dtype=np.float64) * max_value(bit_depth))


def residual_from_difference(diff: np.ndarray, bit_depth: int, eps: float = RESIDUAL_EPS) -> np.ndarray:
    """Residual map of an integer-unit difference ``ref - dist``."""
    m2 = float(max_value(bit_depth)) ** 2
    d = np.asarray(diff, dtype=np.float64)
    return np.log(1.0 / (d * d + eps / m2)) / math.log(m2 / eps)


def compute_residual(ref: PatchDodecuplet, dist: PatchDodecuplet, bit_depth: int | None = None) -> ResidualPatch:
    """Log-error residual patch between a reference and a distorted patch.

    Differences are taken in integer sample units, so identical samples map
    to exactly 1 and a full-scale difference to about -1.
    """
    if ref.samples.shape != dist.samples.shape:
        raise ShapeError(f"reference {ref.samples.shape} and distorted {dist.samples.shape} differ")
    b = ref.bit_depth if bit_depth is None else bit_depth
    diff = denormalize(ref.samples, b) - denormalize(dist.samples, b)
    return ResidualPatch(residual_from_difference(diff, b), (ref.origin, dist.origin))
