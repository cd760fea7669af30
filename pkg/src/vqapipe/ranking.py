"""Pairwise ranking losses and the two training loops.

Stage 1 trains the patch network as a Siamese pair: both patches of a
group go through the same weights and the score gap, squashed by a
sigmoid, is fit to the binary proxy label with cross entropy. Stage 2
trains the aggregator on pairs of sequences from one database, matching
predicted score gaps to subjective score gaps.

A training run lives in a directory::

    config.json          run configuration (no timestamps)
    run_info.json        timestamps and host details
    loss.csv             one row per finished epoch
    sampler_audit.jsonl  one line per optimizer step: pair ids and labels
    train_state.pt       resumable state (weights, optimizer, position)
    checkpoint.pt        final weights in the checkpoint archive format
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.special import expit

from . import checkpoint
from .core import max_value
from .datagen.groups import PatchGroup
from .datagen.store import Corpus
from .errors import ConfigurationError, NumericError, SamplingError
from .pqanet import PQAConfig, PQANet, compile_levels
from .stanet import STAConfig, STANet

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
DEFAULT_PAIR_BUDGET = 16000
RUNTIME_FIELDS = ("threads", "prefetch", "compile", "save_every")


# -- losses -----------------------------------------------------------------

def pair_probability(q_a, q_b):
    """Probability that A ranks above B given scores ``q_a`` and ``q_b``."""
    if isinstance(q_a, torch.Tensor) or isinstance(q_b, torch.Tensor):
        return torch.sigmoid(torch.as_tensor(q_a) - torch.as_tensor(q_b))
    return expit(np.subtract(q_a, q_b))


def _label_value(label):
    return getattr(label, "vmaf_b", label)


def stage1_loss(p, label):
    """Binary cross entropy of ``p`` against the binary label, with ``p`` clamped."""
    y = _label_value(label)
    if isinstance(p, torch.Tensor):
        p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
        y = torch.as_tensor(y, dtype=p.dtype)
        return -(y * torch.log(p) + (1 - y) * torch.log1p(-p))
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


def stage1_loss_grad(q_a, q_b, label):
    """Derivative of the Stage-1 loss with respect to the score gap ``q_a - q_b``."""
    return pair_probability(q_a, q_b) - _label_value(label)


def stage2_loss(score_x, score_y, s_x, s_y, squared: bool = False):
    gap = (score_x - score_y) - (s_x - s_y)
    if squared:
        return gap * gap
    return gap.abs() if isinstance(gap, torch.Tensor) else abs(gap)


# -- configuration ----------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    decay_factor: float = 0.1
    decay_every: int = 20
    decay: str = "lr"  # "lr": step the learning rate; "l2": use decay_factor as an L2 coefficient
    seed: int = 0
    deterministic: bool = True
    prefetch: int = 1
    threads: int | None = None
    precision: str = "float32"
    compile: bool = False
    pair_budget: int = DEFAULT_PAIR_BUDGET
    squared: bool = False
    save_every: int = 50

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("epochs", "batch_size", "decay_every", "pair_budget", "save_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not (self.lr > 0 and self.decay_factor > 0 and self.adam_eps > 0):
            raise ConfigurationError("lr, decay_factor and adam_eps must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError(f"betas must lie in [0, 1), got {self.betas}")
        if self.decay not in ("lr", "l2"):
            raise ConfigurationError(f"decay must be 'lr' or 'l2', got {self.decay!r}")
        if self.precision not in ("float32", "bfloat16", "float64"):
            raise ConfigurationError(f"unknown precision {self.precision!r}")
        # short smoke runs never reach a decay boundary; longer runs must end on one
        if self.decay == "lr" and self.epochs >= self.decay_every and self.epochs % self.decay_every:
            raise ConfigurationError(f"decay period {self.decay_every} does not divide {self.epochs} epochs")

    def lr_at(self, epoch: int) -> float:
        if self.decay != "lr":
            return self.lr
        return self.lr * self.decay_factor ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def snapshot(self) -> dict:
        """Settings that determine the numbers a run produces; speed-only knobs are left out."""
        d = self.to_dict()
        for k in RUNTIME_FIELDS:
            d.pop(k)
        return d


@dataclass(frozen=True)
class SubjectiveRecord:
    sequence_id: str
    score: float
    database_id: str
    source_id: str | None = None
    rating_std: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 100.0):
            raise SamplingError(f"{self.sequence_id}: subjective score {self.score} outside [0, 100]")


def _make_optimizer(params, cfg: TrainConfig):
    wd = cfg.decay_factor if cfg.decay == "l2" else 0.0
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps, weight_decay=wd)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Per-epoch shuffle: a fresh permutation derived from the run seed and the epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


# -- run directory ----------------------------------------------------------

class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    config = property(lambda self: self.root / "config.json")
    info = property(lambda self: self.root / "run_info.json")
    losses = property(lambda self: self.root / "loss.csv")
    audit = property(lambda self: self.root / "sampler_audit.jsonl")
    state = property(lambda self: self.root / "train_state.pt")
    checkpoint = property(lambda self: self.root / "checkpoint.pt")

    def prepare(self, config: dict, resume: bool) -> dict | None:
        """Create the directory or validate it for resumption; returns saved state if any."""
        self.root.mkdir(parents=True, exist_ok=True)
        text = json.dumps(config, indent=1, sort_keys=True) + "\n"
        if self.config.exists() and resume:
            if self.config.read_text() != text:
                raise ConfigurationError(f"{self.root}: existing run has a different configuration")
            if self.state.exists():
                return torch.load(self.state, map_location="cpu", weights_only=False)
        for p in (self.losses, self.audit, self.state, self.checkpoint):
            p.unlink(missing_ok=True)
        self.config.write_text(text)
        self.info.write_text(json.dumps({"started": time.time(), "python": platform.python_version(),
                                         "torch": torch.__version__, "host": platform.node()}, indent=1) + "\n")
        with open(self.losses, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "mean_loss", "lr", "steps"])
        return None

    def truncate_logs(self, epoch: int, audit_lines: int) -> None:
        """Drop log rows written after the saved state so a resumed run appends cleanly."""
        rows = list(csv.reader(open(self.losses)))
        with open(self.losses, "w", newline="") as fh:
            csv.writer(fh).writerows([rows[0]] + [r for r in rows[1:] if int(r[0]) < epoch])
        if self.audit.exists():
            lines = self.audit.read_text().splitlines(keepends=True)[:audit_lines]
            self.audit.write_text("".join(lines))

    def append_loss(self, epoch: int, mean_loss: float, lr: float, steps: int) -> None:
        with open(self.losses, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, repr(float(mean_loss)), repr(float(lr)), steps])

    def read_losses(self) -> list[float]:
        with open(self.losses) as fh:
            return [float(r["mean_loss"]) for r in csv.DictReader(fh)]

    def finish(self) -> None:
        info = json.loads(self.info.read_text()) if self.info.exists() else {}
        info["finished"] = time.time()
        self.info.write_text(json.dumps(info, indent=1) + "\n")


def _save_state(run: RunDir, model, opt, epoch, step, running, audit_lines):
    payload = {"model": model.state_dict(), "optimizer": opt.state_dict(), "epoch": epoch,
               "step": step, "running": running, "audit_lines": audit_lines}
    tmp = run.state.with_name(run.state.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(run.state)


@dataclass
class TrainResult:
    model: torch.nn.Module
    losses: list[float]
    run_dir: Path | None
    checkpoint: Path | None
    steps: int = 0


# -- Stage 1 ----------------------------------------------------------------

class GroupLoader:
    """Turns patch groups into ``(distA+distB, refA+refB)`` float batches."""

    def __init__(self, corpus: Corpus, mode: str, dtype=torch.float32):
        self.corpus = corpus
        self.mode = mode
        self.dtype = dtype

    def _patch(self, ref) -> np.ndarray:
        bits = self.corpus.meta(ref.volume)["bit_depth"]
        return self.corpus.store.patch(ref.volume, *ref.position).astype(np.float32) / np.float32(max_value(bits))

    def bit_depth(self, groups: Sequence[PatchGroup]) -> int:
        depths = {self.corpus.meta(g.dist_a.volume)["bit_depth"] for g in groups}
        depths |= {self.corpus.meta(g.dist_b.volume)["bit_depth"] for g in groups}
        if len(depths) != 1:
            raise SamplingError(f"batch mixes bit depths {sorted(depths)}")
        return depths.pop()

    def __call__(self, groups: Sequence[PatchGroup]):
        dist = [self._patch(g.dist_a) for g in groups] + [self._patch(g.dist_b) for g in groups]
        dist_t = torch.from_numpy(np.stack(dist)).to(self.dtype)
        ref_t = None
        if self.mode == "FR":
            ref = [self._patch(g.ref_a) for g in groups] + [self._patch(g.ref_b) for g in groups]
            ref_t = torch.from_numpy(np.stack(ref)).to(self.dtype)
        labels = torch.tensor([g.label.vmaf_b for g in groups], dtype=self.dtype)
        return dist_t, ref_t, labels, self.bit_depth(groups)


def _autocast(precision: str):
    if precision == "bfloat16":
        return torch.autocast("cpu", dtype=torch.bfloat16)
    return torch.autocast("cpu", enabled=False)


def siamese_scores(model: PQANet, dist: torch.Tensor, ref: torch.Tensor | None, bit_depth: int):
    """Run both members of each pair through the shared weights; returns ``(q_a, q_b)``."""
    score = model(dist, ref, bit_depth).score
    half = dist.shape[0] // 2
    return score[:half], score[half:]


def stage1_batch_loss(model: PQANet, dist, ref, labels, bit_depth: int) -> torch.Tensor:
    q_a, q_b = siamese_scores(model, dist, ref, bit_depth)
    return stage1_loss(pair_probability(q_a.to(labels.dtype), q_b.to(labels.dtype)), labels).mean()


def _batches(groups: Sequence, order: np.ndarray, batch_size: int) -> list[list]:
    return [[groups[i] for i in order[s:s + batch_size]] for s in range(0, len(order), batch_size)]


def _set_threads(cfg: TrainConfig):
    if cfg.threads:
        torch.set_num_threads(int(cfg.threads))


def train_stage1(corpus: Corpus, groups: Sequence[PatchGroup], cfg: TrainConfig, mode: str = "FR",
                 profile: str = "tiny", run_dir: str | Path | None = None, resume: bool = True,
                 model: PQANet | None = None, extra: dict | None = None,
                 on_step: Callable[[int, int, float], None] | None = None) -> TrainResult:
    """Siamese training of the patch network on labeled patch groups."""
    groups = list(groups)
    if not groups:
        raise ConfigurationError("Stage-1 training needs at least one patch group")
    bad = [g.group_id for g in groups if g.status == "rejected"]
    if bad:
        raise ConfigurationError(f"{len(bad)} groups did not pass the outlier filter (e.g. {bad[:3]})")
    _set_threads(cfg)
    torch.manual_seed(cfg.seed)
    dtype = torch.float64 if cfg.precision == "float64" else torch.float32
    if model is None:
        model = PQANet(PQAConfig.profile(profile, mode))
    model = model.to(dtype)
    if model.mode != mode:
        raise ConfigurationError(f"model is {model.mode} but training mode is {mode}")
    opt = _make_optimizer(model.parameters(), cfg)

    run = RunDir(run_dir) if run_dir is not None else None
    config = {"stage": 1, "mode": mode, "profile": profile, "network": model.cfg.to_dict(),
              "train": cfg.snapshot(), "groups": len(groups), **(extra or {})}
    state = run.prepare(config, resume) if run else None
    start_epoch, start_step, running, audit_lines = 0, 0, 0.0, 0
    if state is not None:
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        start_epoch, start_step = state["epoch"], state["step"]
        running, audit_lines = state["running"], state["audit_lines"]
        run.truncate_logs(start_epoch, audit_lines)
        log.info("resuming at epoch %d step %d", start_epoch, start_step)
    if cfg.compile:
        compile_levels(model)

    loader = GroupLoader(corpus, mode, dtype)
    pool = ThreadPoolExecutor(1) if cfg.prefetch > 0 else None
    losses = run.read_losses() if run and state is not None else []
    total_steps = 0
    try:
        for epoch in range(start_epoch, cfg.epochs):
            for g in opt.param_groups:
                g["lr"] = cfg.lr_at(epoch)
            batches = _batches(groups, epoch_order(len(groups), cfg.seed, epoch), cfg.batch_size)
            step0 = start_step if epoch == start_epoch else 0
            if step0 == 0:
                running = 0.0
            model.train()
            pending = pool.submit(loader, batches[step0]) if pool and step0 < len(batches) else None
            for step in range(step0, len(batches)):
                data = pending.result() if pending else loader(batches[step])
                if pool and step + 1 < len(batches):
                    pending = pool.submit(loader, batches[step + 1])
                else:
                    pending = None
                opt.zero_grad(set_to_none=True)
                with _autocast(cfg.precision):
                    loss = stage1_batch_loss(model, *data)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite Stage-1 loss at epoch {epoch} step {step}")
                loss.backward()
                opt.step()
                value = float(loss.detach())
                running += value
                total_steps += 1
                if run:
                    with open(run.audit, "a") as fh:
                        fh.write(json.dumps({"epoch": epoch, "step": step, "groups": [g.group_id for g in batches[step]],
                                             "labels": [g.label.vmaf_b for g in batches[step]], "loss": value}) + "\n")
                    audit_lines += 1
                    if (step + 1) % cfg.save_every == 0 and step + 1 < len(batches):
                        _save_state(run, model, opt, epoch, step + 1, running, audit_lines)
                if on_step:
                    on_step(epoch, step, value)
            mean = running / len(batches)
            losses.append(mean)
            log.info("stage1 epoch %d mean loss %.5f", epoch, mean)
            if run:
                run.append_loss(epoch, mean, cfg.lr_at(epoch), len(batches))
                _save_state(run, model, opt, epoch + 1, 0, 0.0, audit_lines)
    finally:
        if pool:
            pool.shutdown(wait=True)

    ckpt = None
    if run:
        ckpt = run.checkpoint
        checkpoint.save_pqanet(ckpt, model, seed=cfg.seed, stage=1)
        run.finish()
    model.eval()
    return TrainResult(model, losses, run.root if run else None, ckpt, total_steps)


@torch.no_grad()
def pair_scores(model: PQANet, corpus: Corpus, groups: Sequence[PatchGroup], batch_size: int = 4) -> np.ndarray:
    """``(n, 2)`` array of patch scores for members A and B of each group."""
    model.eval()
    loader = GroupLoader(corpus, model.mode, next(model.parameters()).dtype)
    out = []
    for s in range(0, len(groups), batch_size):
        dist, ref, _, bits = loader(groups[s:s + batch_size])
        q_a, q_b = siamese_scores(model, dist, ref, bits)
        out.append(torch.stack([q_a, q_b], dim=1).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 2))


def pairwise_accuracy(model: PQANet, corpus: Corpus, groups: Sequence[PatchGroup], batch_size: int = 4) -> float:
    """Fraction of groups whose predicted order agrees with the binary label."""
    if not groups:
        raise ConfigurationError("no groups to evaluate")
    scores = pair_scores(model, corpus, groups, batch_size)
    labels = np.array([g.label.vmaf_b for g in groups])
    return float(np.mean((scores[:, 0] > scores[:, 1]).astype(int) == labels))


# -- Stage 2 ----------------------------------------------------------------

@dataclass
class SequenceSample:
    """Precomputed Stage-2 inputs for one sequence."""

    record: SubjectiveRecord
    quality: np.ndarray
    features: np.ndarray

    @property
    def sequence_id(self) -> str:
        return self.record.sequence_id

    @property
    def database_id(self) -> str:
        return self.record.database_id


@dataclass(frozen=True)
class SequencePair:
    x: int
    y: int
    database_id: str


def make_pair(samples: Sequence[SequenceSample], x: int, y: int) -> SequencePair:
    a, b = samples[x].database_id, samples[y].database_id
    if a != b:
        raise SamplingError(f"pair ({samples[x].sequence_id}, {samples[y].sequence_id}) crosses databases {a!r} and {b!r}")
    return SequencePair(x, y, a)


def sample_sequence_pairs(samples: Sequence[SequenceSample], budget: int = DEFAULT_PAIR_BUDGET,
                          seed: int = 0) -> list[SequencePair]:
    """Draw up to ``budget`` distinct ordered pairs, each within one database.

    When the budget covers every available pair, all of them are used.
    """
    by_db: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_db.setdefault(s.database_id, []).append(i)
    candidates = [(i, j) for idx in by_db.values() for i in idx for j in idx if i != j]
    if not candidates:
        raise SamplingError("no database has two sequences to pair")
    rng = np.random.default_rng([seed, 2])
    if budget < len(candidates):
        chosen = rng.choice(len(candidates), size=budget, replace=False)
        candidates = [candidates[k] for k in chosen]
    return [make_pair(samples, i, j) for i, j in candidates]


def _stage2_tensors(samples: Sequence[SequenceSample], dtype):
    q = torch.as_tensor(np.stack([s.quality for s in samples]), dtype=dtype)
    f = torch.as_tensor(np.stack([s.features for s in samples]), dtype=dtype)
    s = torch.as_tensor([s.record.score for s in samples], dtype=dtype)
    if not (torch.isfinite(q).all() and torch.isfinite(f).all()):
        raise NumericError("Stage-2 inputs contain non-finite values")
    return q, f, s


def train_stage2(samples: Sequence[SequenceSample], cfg: TrainConfig, pairs: Sequence[SequencePair] | None = None,
                 run_dir: str | Path | None = None, resume: bool = True, model: STANet | None = None,
                 sta_config: STAConfig | None = None, extra: dict | None = None) -> TrainResult:
    """Fit the aggregator to within-database subjective score gaps."""
    samples = list(samples)
    if len(samples) < 2:
        raise ConfigurationError("Stage-2 training needs at least two sequences")
    if pairs is None:
        pairs = sample_sequence_pairs(samples, cfg.pair_budget, cfg.seed)
    pairs = [make_pair(samples, p.x, p.y) for p in pairs]
    _set_threads(cfg)
    torch.manual_seed(cfg.seed)
    dtype = torch.float64 if cfg.precision == "float64" else torch.float32
    if model is None:
        model = STANet(sta_config or STAConfig(in_channels=samples[0].features.shape[-1]))
    model = model.to(dtype)
    opt = _make_optimizer(model.parameters(), cfg)
    q, f, s = _stage2_tensors(samples, dtype)

    run = RunDir(run_dir) if run_dir is not None else None
    config = {"stage": 2, "network": model.cfg.to_dict(), "train": cfg.snapshot(), "pairs": len(pairs),
              "sequences": len(samples), **(extra or {})}
    state = run.prepare(config, resume) if run else None
    start_epoch, audit_lines = 0, 0
    if state is not None:
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        start_epoch, audit_lines = state["epoch"], state["audit_lines"]
        run.truncate_logs(start_epoch, audit_lines)
    losses = run.read_losses() if run and state is not None else []
    total_steps = 0
    for epoch in range(start_epoch, cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = cfg.lr_at(epoch)
        batches = _batches(pairs, epoch_order(len(pairs), cfg.seed, epoch), cfg.batch_size)
        running = 0.0
        model.train()
        audit = open(run.audit, "a") if run else None
        try:
            for step, batch in enumerate(batches):
                xs = torch.tensor([p.x for p in batch])
                ys = torch.tensor([p.y for p in batch])
                opt.zero_grad(set_to_none=True)
                pred = model(torch.cat([q[xs], q[ys]]), torch.cat([f[xs], f[ys]]))
                n = len(batch)
                loss = stage2_loss(pred[:n], pred[n:], s[xs], s[ys], cfg.squared).mean()
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite Stage-2 loss at epoch {epoch} step {step}")
                loss.backward()
                opt.step()
                running += float(loss.detach())
                total_steps += 1
                if audit:
                    audit.write(json.dumps({
                        "epoch": epoch, "step": step,
                        "pairs": [[samples[p.x].sequence_id, samples[p.y].sequence_id] for p in batch],
                        "databases": [p.database_id for p in batch],
                        "targets": [samples[p.x].record.score - samples[p.y].record.score for p in batch],
                    }) + "\n")
                    audit_lines += 1
        finally:
            if audit:
                audit.close()
        mean = running / len(batches)
        losses.append(mean)
        if run:
            run.append_loss(epoch, mean, cfg.lr_at(epoch), len(batches))
            _save_state(run, model, opt, epoch + 1, 0, 0.0, audit_lines)
    ckpt = None
    if run:
        ckpt = run.checkpoint
        checkpoint.save_stanet(ckpt, model, seed=cfg.seed, stage=2)
        run.finish()
    model.eval()
    return TrainResult(model, losses, run.root if run else None, ckpt, total_steps)


def read_audit(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
