"""Patch-group sampling, outlier rejection and the group manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import DataError, SamplingError
from .store import Corpus

SINGLE = "single_source"
DUAL = "dual_source"
KINDS = (SINGLE, DUAL)
_ALIASES = {"SS": SINGLE, "DS": DUAL, SINGLE: SINGLE, DUAL: DUAL}

THRESHOLD_SS = 6.0
THRESHOLD_DS = 15.0
SS_FRACTION = 0.3

ROLES = {SINGLE: ("distA", "distB", "ref"), DUAL: ("distA", "refA", "distB", "refB")}


def canonical_kind(kind: str) -> str:
    try:
        return _ALIASES[kind]
    except KeyError:
        raise SamplingError(f"unknown group kind {kind!r}") from None


@dataclass(frozen=True)
class RankLabel:
    vmaf_b: int
    delta: float

    def __post_init__(self):
        if self.vmaf_b not in (0, 1):
            raise ValueError(f"binary label must be 0 or 1, got {self.vmaf_b}")
        if (self.vmaf_b == 1) != (self.delta > 0):
            raise ValueError(f"label {self.vmaf_b} inconsistent with delta {self.delta}")

    @classmethod
    def from_scores(cls, score_a: float, score_b: float) -> "RankLabel":
        delta = float(score_a) - float(score_b)
        return cls(int(delta > 0), delta)


@dataclass(frozen=True)
class PatchRef:
    volume: str
    x: int
    y: int
    t: int
    offset: int = 0

    @property
    def position(self) -> tuple[int, int, int]:
        return self.x, self.y, self.t


@dataclass
class PatchGroup:
    group_id: int
    kind: str
    members: tuple[PatchRef, ...]
    scores: tuple[float, float]
    label: RankLabel
    status: str = "candidate"

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        n = len(ROLES[self.kind])
        if len(self.members) != n:
            raise DataError(f"{self.kind} group needs {n} members, got {len(self.members)}")
        if self.kind == SINGLE and self.members[0].position != self.members[1].position:
            raise DataError("single-source members must be co-located")

    @property
    def delta(self) -> float:
        return self.label.delta

    def role(self, name: str) -> PatchRef:
        return self.members[ROLES[self.kind].index(name)]

    @property
    def dist_a(self) -> PatchRef:
        return self.role("distA")

    @property
    def dist_b(self) -> PatchRef:
        return self.role("distB")

    @property
    def ref_a(self) -> PatchRef:
        return self.role("ref" if self.kind == SINGLE else "refA")

    @property
    def ref_b(self) -> PatchRef:
        return self.role("ref" if self.kind == SINGLE else "refB")

    def key(self) -> tuple:
        return (self.kind,) + tuple((m.volume, m.x, m.y, m.t) for m in self.members)

    def to_record(self) -> dict:
        return {
            "group_id": self.group_id,
            "kind": self.kind,
            "members": [
                {"role": r, "volume": m.volume, "x": m.x, "y": m.y, "t": m.t, "offset": m.offset}
                for r, m in zip(ROLES[self.kind], self.members)
            ],
            "scores": list(self.scores),
            "delta": self.label.delta,
            "vmaf_b": self.label.vmaf_b,
            "status": self.status,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PatchGroup":
        members = tuple(PatchRef(m["volume"], m["x"], m["y"], m["t"], m.get("offset", 0)) for m in rec["members"])
        return cls(rec["group_id"], rec["kind"], members, tuple(rec["scores"]),
                   RankLabel(rec["vmaf_b"], rec["delta"]), rec.get("status", "candidate"))


def _ref(corpus: Corpus, volume: str, pos) -> PatchRef:
    return PatchRef(volume, *pos, offset=corpus.meta(volume)["offset"])


def _draw_single(corpus: Corpus, rng: np.random.Generator, gid: int) -> PatchGroup:
    eligible = [s for s in corpus.sources if len(corpus.by_source[s]) >= 2]
    if not eligible:
        raise SamplingError("single-source sampling needs a source with at least two distorted versions")
    src = eligible[rng.integers(len(eligible))]
    versions = corpus.by_source[src]
    i, j = rng.choice(len(versions), size=2, replace=False)
    a, b = versions[i], versions[j]
    positions = corpus.positions(a)
    p = int(rng.integers(len(positions)))
    sa, sb = corpus.proxy(a, p), corpus.proxy(b, p)
    ref = corpus.reference_of(a)
    members = (_ref(corpus, a, positions[p]), _ref(corpus, b, positions[p]), _ref(corpus, ref, positions[p]))
    return PatchGroup(gid, SINGLE, members, (sa, sb), RankLabel.from_scores(sa, sb))


def _draw_dual(corpus: Corpus, rng: np.random.Generator, gid: int) -> PatchGroup:
    pool = corpus.distorted
    if len(pool) < 2:
        raise SamplingError("dual-source sampling needs at least two distorted volumes")
    while True:
        a, b = pool[rng.integers(len(pool))], pool[rng.integers(len(pool))]
        pa_list, pb_list = corpus.positions(a), corpus.positions(b)
        pa, pb = int(rng.integers(len(pa_list))), int(rng.integers(len(pb_list)))
        if a != b or pa != pb:
            break
    sa, sb = corpus.proxy(a, pa), corpus.proxy(b, pb)
    members = (
        _ref(corpus, a, pa_list[pa]), _ref(corpus, corpus.reference_of(a), pa_list[pa]),
        _ref(corpus, b, pb_list[pb]), _ref(corpus, corpus.reference_of(b), pb_list[pb]),
    )
    return PatchGroup(gid, DUAL, members, (sa, sb), RankLabel.from_scores(sa, sb))


def sample_groups(corpus: Corpus, kind: str, count: int, seed: int = 0, start_id: int = 0,
                  seen: set | None = None, max_attempts: int | None = None) -> list[PatchGroup]:
    """Draw ``count`` distinct labeled candidate groups of one kind.

    Single-source groups pair two versions of one source at one window;
    dual-source groups pair two independently chosen windows.
    """
    kind = canonical_kind(kind)
    draw = _draw_single if kind == SINGLE else _draw_dual
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    seen = set() if seen is None else seen
    limit = max_attempts if max_attempts is not None else 50 * max(count, 1)
    out: list[PatchGroup] = []
    attempts = 0
    while len(out) < count and attempts < limit:
        attempts += 1
        g = draw(corpus, rng, start_id + len(out))
        if g.key() in seen:
            continue
        seen.add(g.key())
        out.append(g)
    return out


def passes_threshold(group: PatchGroup, thr_ss: float = THRESHOLD_SS, thr_ds: float = THRESHOLD_DS) -> bool:
    thr = thr_ss if group.kind == SINGLE else thr_ds
    return not abs(group.delta) < thr


def filter_outliers(groups: Iterable[PatchGroup], thr_ss: float = THRESHOLD_SS,
                    thr_ds: float = THRESHOLD_DS) -> list[PatchGroup]:
    """Drop groups whose label gap is smaller than their kind's threshold.

    A gap exactly equal to the threshold is kept.
    """
    return [g for g in groups if passes_threshold(g, thr_ss, thr_ds)]


@dataclass
class GroupSet:
    retained: list[PatchGroup]
    candidates: list[PatchGroup] = field(default_factory=list)

    def counts(self) -> dict:
        by = {k: sum(1 for g in self.retained if g.kind == k) for k in KINDS}
        total = len(self.candidates)
        return {
            "retained": len(self.retained),
            "candidates": total,
            "rejected": total - len(self.retained),
            "rejection_rate": (total - len(self.retained)) / total if total else 0.0,
            **by,
        }


def generate_groups(corpus: Corpus, total: int = 2048, ss_fraction: float = SS_FRACTION, seed: int = 0,
                    thr_ss: float = THRESHOLD_SS, thr_ds: float = THRESHOLD_DS,
                    attempts_per_group: int = 50) -> GroupSet:
    """Sample and filter candidates until ``total`` groups survive.

    Candidates are drawn one at a time per kind so that the retained mix is
    exactly ``ss_fraction`` single-source groups. Sampling of a kind stops
    early after ``attempts_per_group * target`` draws without reaching the
    target.
    """
    targets = {SINGLE: int(round(total * ss_fraction))}
    targets[DUAL] = total - targets[SINGLE]
    candidates: list[PatchGroup] = []
    retained: list[PatchGroup] = []
    seen: set = set()
    for kind in KINDS:
        target = targets[kind]
        if target == 0:
            continue
        rng = np.random.default_rng([seed, 7, KINDS.index(kind)])
        draw = _draw_single if kind == SINGLE else _draw_dual
        kept = 0
        for _ in range(attempts_per_group * target):
            if kept >= target:
                break
            g = draw(corpus, rng, len(candidates))
            if g.key() in seen:
                continue
            seen.add(g.key())
            if passes_threshold(g, thr_ss, thr_ds):
                g.status = "retained"
                retained.append(g)
                kept += 1
            else:
                g.status = "rejected"
            candidates.append(g)
    return GroupSet(retained, candidates)


def write_manifest(path: str | Path, groups: Iterable[PatchGroup]) -> str:
    """Write one JSON record per line; returns the SHA-256 of the file."""
    lines = [json.dumps(g.to_record(), sort_keys=True) for g in groups]
    data = ("\n".join(lines) + "\n") if lines else ""
    Path(path).write_text(data)
    return hashlib.sha256(data.encode()).hexdigest()


def read_manifest(path: str | Path, status: str | None = None) -> list[PatchGroup]:
    groups = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                g = PatchGroup.from_record(json.loads(line))
                if status is None or g.status == status:
                    groups.append(g)
    return groups


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_group_arrays(corpus: Corpus, group: PatchGroup) -> dict[str, np.ndarray]:
    """Integer sample arrays ``(12, 3, 256, 256)`` for distA/refA/distB/refB."""
    s = corpus.store
    return {
        "distA": s.patch(group.dist_a.volume, *group.dist_a.position),
        "refA": s.patch(group.ref_a.volume, *group.ref_a.position),
        "distB": s.patch(group.dist_b.volume, *group.dist_b.position),
        "refB": s.patch(group.ref_b.volume, *group.ref_b.position),
    }
