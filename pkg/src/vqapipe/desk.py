"""Desk-scale end-to-end learning protocol on synthetic content.

Every stage caches its output under one root directory and is skipped when
a finished artifact with the same settings exists, so an interrupted run
picks up where it stopped (Stage-1 training resumes mid-epoch).

Layout::

    corpus_train/  corpus_heldout/      patch stores
    groups_train.jsonl  groups_heldout.jsonl
    stage1_FR/  stage1_NR/              Stage-1 run directories
    stage2_FR/  stage2_NR/              Stage-2 run directories
    mos.csv                             synthetic subjective scores
    results.json                        measured outcomes
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .datagen import Corpus, LadderSpec, build_corpus, generate_groups, make_source, read_manifest, write_manifest
from .datagen.operators import DEFAULT_OPERATORS
from .datagen.store import PatchStore
from .evalkit import srocc
from .pipeline import sequence_inputs
from .pqanet import PQAConfig, PQANet
from .ranking import (SequenceSample, SubjectiveRecord, TrainConfig, pairwise_accuracy, sample_sequence_pairs,
                      train_stage1, train_stage2)
from .stanet import STAConfig, aggregate

log = logging.getLogger(__name__)

HELDOUT_SEED_OFFSET = 1000
DATABASE_ID = "desk"

# thresholds of the learning checks
FR_ACCURACY = 0.85
NR_ACCURACY = 0.80
PIPELINE_SROCC = 0.90


@dataclass
class DeskConfig:
    root: str
    train_sources: int = 20
    heldout_sources: int = 4
    width: int = 512
    height: int = 256
    frames: int = 24
    operators: tuple[str, ...] = DEFAULT_OPERATORS
    severities: int = 4
    scales: tuple[float, ...] = (1.0,)
    groups: int = 2048
    heldout_groups: int = 512
    ss_fraction: float = 0.3
    seed: int = 0
    modes: tuple[str, ...] = ("FR", "NR")
    profile: str = "tiny"
    epochs: int = 60
    batch_size: int = 4
    lr: float = 1e-4
    precision: str = "float32"
    compile: bool = False
    mos_pairs: int = 500
    stage2_epochs: int = 60
    workers: int = 1
    extra: dict = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return Path(self.root)

    def ladder(self) -> LadderSpec:
        return LadderSpec(tuple(self.scales), tuple(self.operators), self.severities)

    def stage1_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed,
                           precision=self.precision, compile=self.compile)

    def stage2_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.stage2_epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed,
                           pair_budget=self.mos_pairs)


def _corpus_key(cfg: DeskConfig, first_seed: int, count: int) -> dict:
    return {"first_seed": first_seed, "count": count, "size": [cfg.width, cfg.height, cfg.frames],
            "ladder": {"scales": list(cfg.scales), "operators": list(cfg.operators), "severities": cfg.severities},
            "seed": cfg.seed}


def ensure_corpus(cfg: DeskConfig, name: str, first_seed: int, count: int) -> Corpus:
    root = cfg.path / name
    key = _corpus_key(cfg, first_seed, count)
    marker = root / "desk_key.json"
    if marker.exists() and json.loads(marker.read_text()) == key:
        return Corpus(PatchStore.open(root))
    t0 = time.time()
    sources = (make_source(first_seed + i, cfg.width, cfg.height, cfg.frames) for i in range(count))
    corpus = build_corpus(sources, root, cfg.ladder(), cfg.seed, workers=cfg.workers)
    marker.write_text(json.dumps(key, sort_keys=True) + "\n")
    log.info("built %s (%d distorted volumes) in %.0f s", name, len(corpus.distorted), time.time() - t0)
    return corpus


def ensure_groups(cfg: DeskConfig, corpus: Corpus, name: str, total: int, seed: int):
    path = cfg.path / f"{name}.jsonl"
    if not path.exists():
        gs = generate_groups(corpus, total=total, ss_fraction=cfg.ss_fraction, seed=seed)
        digest = write_manifest(path, gs.candidates)
        (cfg.path / f"{name}.summary.json").write_text(json.dumps({**gs.counts(), "sha256": digest}, indent=1) + "\n")
    return read_manifest(path, status="retained")


def severity_mos(corpus: Corpus) -> dict[tuple[str, int], float]:
    """Content-independent score per (operator, severity): the mean proxy label over a corpus."""
    acc: dict[tuple[str, int], list[float]] = {}
    for v in corpus.distorted:
        m = corpus.meta(v)
        acc.setdefault((m["operator"], int(m["severity"])), []).extend(m["proxy"])
    return {k: float(np.clip(np.mean(vals), 0.0, 100.0)) for k, vals in sorted(acc.items())}


def _records(corpus: Corpus, mos: dict) -> list[SubjectiveRecord]:
    out = []
    for v in corpus.distorted:
        m = corpus.meta(v)
        out.append(SubjectiveRecord(v, mos[(m["operator"], int(m["severity"]))], DATABASE_ID, m["source_id"]))
    return out


def _samples(model: PQANet, corpus: Corpus, records) -> list[SequenceSample]:
    out = []
    for rec in records:
        dist = corpus.store.volume(rec.sequence_id)
        ref = corpus.store.volume(corpus.reference_of(rec.sequence_id)) if model.mode == "FR" else None
        inp = sequence_inputs(model, dist, ref)
        out.append(SequenceSample(rec, inp.quality_tensor().values, inp.feature_tensor().values))
    return out


def load_stage1(path: Path) -> PQANet:
    """Weights from a finished checkpoint, or the latest resumable state of an unfinished run."""
    run = Path(path)
    if (run / "checkpoint.pt").exists():
        return checkpoint.load_pqanet(run / "checkpoint.pt")
    state = torch.load(run / "train_state.pt", map_location="cpu", weights_only=False)
    cfg = json.loads((run / "config.json").read_text())["network"]
    fields = {k: cfg[k] for k in ("mode", "channels", "embed_dim", "window", "heads", "mlp_ratio", "frames", "slope")}
    model = PQANet(PQAConfig(**fields))
    model.load_state_dict(state["model"])
    return model.eval()


def _write_results(cfg: DeskConfig, results: dict) -> None:
    (cfg.path / "results.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")


def run_desk(cfg: DeskConfig, stop_after: str | None = None) -> dict:
    """Run (or resume) the protocol; returns the measured results.

    ``stop_after`` may be ``"data"`` to only build corpora and manifests.
    """
    cfg.path.mkdir(parents=True, exist_ok=True)
    (cfg.path / "desk_config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True, default=list) + "\n")
    results_path = cfg.path / "results.json"
    results = json.loads(results_path.read_text()) if results_path.exists() else {}
    train = ensure_corpus(cfg, "corpus_train", 0, cfg.train_sources)
    held = ensure_corpus(cfg, "corpus_heldout", HELDOUT_SEED_OFFSET, cfg.heldout_sources)
    train_groups = ensure_groups(cfg, train, "groups_train", cfg.groups, cfg.seed)
    held_groups = ensure_groups(cfg, held, "groups_heldout", cfg.heldout_groups, cfg.seed + 1)
    results["data"] = {"train_groups": len(train_groups), "heldout_groups": len(held_groups),
                       "train_volumes": len(train.distorted), "heldout_volumes": len(held.distorted)}
    _write_results(cfg, results)
    if stop_after == "data":
        return results

    mos = severity_mos(train)
    with open(cfg.path / "mos.csv", "w") as fh:
        fh.write("operator,severity,mos\n")
        fh.writelines(f"{op},{sev},{val!r}\n" for (op, sev), val in mos.items())
    for mode in cfg.modes:
        key = f"stage1_{mode}"
        t0 = time.time()
        res = train_stage1(train, train_groups, cfg.stage1_config(), mode, cfg.profile, cfg.path / key,
                           extra={"desk": _corpus_key(cfg, 0, cfg.train_sources)})
        acc = pairwise_accuracy(res.model, held, held_groups)
        threshold = FR_ACCURACY if mode == "FR" else NR_ACCURACY
        results[key] = {"losses": res.losses, "heldout_accuracy": acc, "threshold": threshold,
                        "passed": acc >= threshold, "seconds_this_session": time.time() - t0}
        _write_results(cfg, results)
        log.info("%s held-out pairwise accuracy %.4f", mode, acc)

        model = res.model
        train_samples = _samples(model, train, _records(train, mos))
        held_samples = _samples(model, held, _records(held, mos))
        pairs = sample_sequence_pairs(train_samples, cfg.mos_pairs, cfg.seed)
        s2 = train_stage2(train_samples, cfg.stage2_config(), pairs, cfg.path / f"stage2_{mode}",
                          sta_config=STAConfig(in_channels=train_samples[0].features.shape[-1]))
        preds = [aggregate(s.quality, s.features, s2.model) for s in held_samples]
        truth = [s.record.score for s in held_samples]
        rho = srocc(preds, truth)
        patch_mean = [float(np.mean(s.quality)) for s in held_samples]
        results[f"pipeline_{mode}"] = {"srocc": rho, "threshold": PIPELINE_SROCC, "passed": rho >= PIPELINE_SROCC,
                                       "mean_patch_srocc": srocc(patch_mean, truth), "pairs": len(pairs),
                                       "stage2_losses": s2.losses}
        _write_results(cfg, results)
        log.info("%s pipeline SROCC %.4f", mode, rho)
    return results


def evaluate_partial(cfg: DeskConfig, mode: str = "FR") -> dict:
    """Held-out accuracy of the latest Stage-1 state of a possibly unfinished run."""
    run = cfg.path / f"stage1_{mode}"
    state = torch.load(run / "train_state.pt", map_location="cpu", weights_only=False)
    model = load_stage1(run)
    held = Corpus(PatchStore.open(cfg.path / "corpus_heldout"))
    groups = read_manifest(cfg.path / "groups_heldout.jsonl", status="retained")
    return {"epoch": state["epoch"], "step": state["step"], "heldout_accuracy": pairwise_accuracy(model, held, groups)}


def main(argv=None) -> int:
    import argparse

    p = argparse.ArgumentParser(prog="python -m vqapipe.desk", description="desk-scale learning protocol")
    p.add_argument("root")
    p.add_argument("--modes", default="FR,NR")
    p.add_argument("--precision", default="float32")
    p.add_argument("--compile", action="store_true")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--data-only", action="store_true")
    p.add_argument("--partial", metavar="MODE", help="report held-out accuracy of the current Stage-1 state")
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = DeskConfig(a.root, modes=tuple(a.modes.split(",")), precision=a.precision, compile=a.compile,
                     epochs=a.epochs)
    if a.partial:
        print(json.dumps(evaluate_partial(cfg, a.partial)))
        return 0
    print(json.dumps(run_desk(cfg, "data" if a.data_only else None), indent=1))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
