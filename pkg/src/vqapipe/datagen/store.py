"""On-disk patch store and labeled corpus.

Volumes are written back to back into ``store.bin`` in frame-planar layout
``(frames, 3, height, width)``, so a dodecuplet is one strided slice of a
memory map. ``store.json`` indexes every block (byte offset, shape, sample
type) and carries the per-volume metadata, including the proxy label of
every patch position of each distorted volume.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from ..core import PATCH_FRAMES, PATCH_SIZE, PatchDodecuplet, VideoVolume, grid_dims, max_value, patch_positions, to_444
from ..errors import ConfigurationError, DataError, SamplingError
from .ladder import LadderSpec, build_ladder
from .proxy import get_metric

log = logging.getLogger(__name__)

STORE_VERSION = 1


class PatchStore:
    def __init__(self, root: str | Path, index: dict, mode: str = "r"):
        self.root = Path(root)
        self.index = index
        self._mmap = None
        self._mode = mode

    @property
    def bin_path(self) -> Path:
        return self.root / "store.bin"

    @property
    def index_path(self) -> Path:
        return self.root / "store.json"

    @classmethod
    def create(cls, root: str | Path) -> "PatchStore":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        store = cls(root, {"version": STORE_VERSION, "volumes": {}}, mode="w")
        store.bin_path.write_bytes(b"")
        return store

    @classmethod
    def open(cls, root: str | Path) -> "PatchStore":
        root = Path(root)
        path = root / "store.json"
        if not path.exists():
            raise ConfigurationError(f"{root}: not a patch store (missing store.json)")
        index = json.loads(path.read_text())
        if index.get("version") != STORE_VERSION:
            raise ConfigurationError(f"{root}: unsupported store version {index.get('version')}")
        return cls(root, index)

    def add(self, volume: VideoVolume, **meta) -> int:
        if self._mode != "w":
            raise DataError("store opened read-only")
        if volume.sequence_id in self.index["volumes"]:
            raise DataError(f"duplicate volume id {volume.sequence_id!r}")
        volume = to_444(volume)
        block = np.ascontiguousarray(volume.stacked().transpose(3, 2, 0, 1))
        dtype = "u1" if volume.bit_depth == 8 else "<u2"
        block = block.astype(dtype)
        with open(self.bin_path, "ab") as fh:
            offset = fh.tell()
            fh.write(block.tobytes())
        self.index["volumes"][volume.sequence_id] = {
            "offset": offset,
            "shape": list(block.shape),
            "dtype": dtype,
            "bit_depth": volume.bit_depth,
            **meta,
        }
        return offset

    def flush(self) -> None:
        self.index_path.write_text(json.dumps(self.index, indent=1, sort_keys=True) + "\n")

    def _map(self) -> np.memmap:
        if self._mmap is None:
            self._mmap = np.memmap(self.bin_path, dtype=np.uint8, mode="r")
        return self._mmap

    def meta(self, volume_id: str) -> dict:
        try:
            return self.index["volumes"][volume_id]
        except KeyError:
            raise DataError(f"volume {volume_id!r} not in store {self.root}") from None

    def volume_ids(self) -> list[str]:
        return list(self.index["volumes"])

    def block(self, volume_id: str) -> np.ndarray:
        """Frame-planar ``(frames, 3, height, width)`` view of a stored volume."""
        m = self.meta(volume_id)
        dtype = np.dtype(m["dtype"])
        count = int(np.prod(m["shape"]))
        raw = self._map()[m["offset"]:m["offset"] + count * dtype.itemsize]
        return raw.view(dtype).reshape(m["shape"])

    def patch(self, volume_id: str, x: int, y: int, t: int) -> np.ndarray:
        """Integer samples ``(12, 3, 256, 256)``."""
        return np.asarray(self.block(volume_id)[t:t + PATCH_FRAMES, :, y:y + PATCH_SIZE, x:x + PATCH_SIZE])

    def dodecuplet(self, volume_id: str, x: int, y: int, t: int) -> PatchDodecuplet:
        bits = self.meta(volume_id)["bit_depth"]
        samples = self.patch(volume_id, x, y, t).transpose(2, 3, 1, 0).astype(np.float32) / np.float32(max_value(bits))
        return PatchDodecuplet(np.ascontiguousarray(samples), (volume_id, x, y, t), bits)

    def volume(self, volume_id: str) -> VideoVolume:
        m = self.meta(volume_id)
        stacked = np.asarray(self.block(volume_id)).transpose(2, 3, 1, 0)
        return VideoVolume.from_stacked(np.ascontiguousarray(stacked), m["bit_depth"], volume_id)


class Corpus:
    """A patch store viewed as references plus their labeled distorted versions."""

    def __init__(self, store: PatchStore):
        self.store = store
        vols = store.index["volumes"]
        self.distorted = [v for v, m in vols.items() if m.get("kind") == "distorted"]
        self.by_source: dict[str, list[str]] = {}
        for v in self.distorted:
            self.by_source.setdefault(vols[v]["source_id"], []).append(v)
        self.sources = sorted(self.by_source)

    @classmethod
    def open(cls, root: str | Path) -> "Corpus":
        return cls(PatchStore.open(root))

    def meta(self, volume_id: str) -> dict:
        return self.store.meta(volume_id)

    def reference_of(self, volume_id: str) -> str:
        return self.meta(volume_id)["reference"]

    def positions(self, volume_id: str) -> list[tuple[int, int, int]]:
        return [tuple(p) for p in self.meta(volume_id)["positions"]]

    def proxy(self, volume_id: str, position_index: int) -> float:
        return float(self.meta(volume_id)["proxy"][position_index])


def _label_volume(store: PatchStore, dist_id: str, ref_id: str, positions, metric: Callable) -> list[float]:
    return [
        float(metric(store.dodecuplet(dist_id, *p), store.dodecuplet(ref_id, *p)))
        for p in positions
    ]


def build_corpus(sources: Iterable[VideoVolume], root: str | Path, spec: LadderSpec | None = None,
                 seed: int = 0, metric: str | Callable = "msssim", workers: int = 1,
                 on_error: Callable[[str, Exception], None] | None = None) -> Corpus:
    """Write references, their ladders and per-patch proxy labels to a new store.

    A source that fails is reported through ``on_error`` (when given) and
    skipped; otherwise the error propagates.
    """
    spec = spec or LadderSpec()
    fn = get_metric(metric) if isinstance(metric, str) else metric
    store = PatchStore.create(root)
    pending = []
    for src in sources:
        try:
            src = to_444(src)
            dims = grid_dims(src.width, src.height, src.frame_count)
            if min(dims) < 1:
                raise DataError(f"source {src.sequence_id} is smaller than one patch")
            positions = [list(p) for p in patch_positions(dims)]
            ladder = build_ladder(src, spec, seed)
        except Exception as exc:
            if on_error is None:
                raise
            on_error(src.sequence_id, exc)
            continue
        store.add(src, kind="reference", source_id=src.sequence_id, positions=positions, grid=list(dims))
        for v in ladder:
            store.add(v.volume, kind="distorted", source_id=v.source_id, reference=src.sequence_id,
                      operator=v.operator, severity=v.severity, scale=v.scale,
                      positions=positions, grid=list(dims))
            pending.append((v.version_id, src.sequence_id, positions))
        log.info("stored %s with %d distorted versions", src.sequence_id, len(ladder))

    if not pending:
        store.flush()
        raise SamplingError("no distorted volumes were produced")

    def job(item):
        dist_id, ref_id, positions = item
        return _label_volume(store, dist_id, ref_id, positions, fn)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            labels = list(pool.map(job, pending))
    else:
        labels = [job(item) for item in pending]
    for (dist_id, _, _), scores in zip(pending, labels):
        store.index["volumes"][dist_id]["proxy"] = scores
    store.index["spec"] = {"scales": list(spec.scales), "operators": list(spec.operators),
                           "severities": spec.severities, "seed": seed}
    store.flush()
    store._mode = "r"
    return Corpus(store)
