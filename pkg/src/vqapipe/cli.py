"""Command-line entry point: ``vqapipe <command> [options]``.

Exit status is 0 on success, 2 for usage errors, 3 for configuration
errors, 4 for data errors and 5 for numeric errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import checkpoint, evalkit
from .config import ENV_VAR, RunConfig, dump_config, load_config
from .core import RawFormat, load_video
from .datagen import (LadderSpec, build_corpus, file_sha256, generate_groups, make_source, read_manifest,
                      write_manifest)
from .datagen.operators import operator_from_config, register_operator
from .datagen.proxy import ExternalCommandMetric, get_metric
from .datagen.store import Corpus
from .errors import ConfigurationError, DataError, ModeError, UsageError, VQAError
from .pipeline import score_sequence, sequence_inputs, write_patch_scores, write_scores
from .ranking import SequenceSample, SubjectiveRecord, train_stage1, train_stage2

log = logging.getLogger("vqapipe")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# -- gen-dataset ------------------------------------------------------------

def _sources(cfg: RunConfig):
    if cfg.paths.sources is None:
        d = cfg.data
        return [make_source(cfg.seed * 100003 + i, d.width, d.height, d.frames) for i in range(d.synthetic_sources)]
    root = cfg.resolve(cfg.paths.sources)
    files = sorted(root.glob("*.yuv")) if root.is_dir() else [root]
    return [load_video(f) for f in files]


def cmd_gen_dataset(cfg: RunConfig, args) -> int:
    if cfg.paths.sources is not None:
        cfg.require("sources")
    for name, entry in cfg.data.operator_overrides.items():
        register_operator(operator_from_config(name, entry), overwrite=True)
    metric = ExternalCommandMetric(cfg.data.metric_command) if cfg.data.metric_command else get_metric(cfg.data.metric)
    spec = LadderSpec(tuple(cfg.data.scales), tuple(cfg.data.operators), cfg.data.severities)
    failures: dict[str, str] = {}

    def on_error(source_id, exc):
        failures[source_id] = f"{type(exc).__name__}: {exc}"
        print(f"source {source_id}: {failures[source_id]}", file=sys.stderr)

    t0 = time.time()
    sources = _sources(cfg)
    if not sources:
        raise DataError("no source clips found")
    corpus = build_corpus(sources, cfg.resolve(cfg.paths.corpus), spec, cfg.seed, metric, cfg.threads, on_error)
    gs = generate_groups(corpus, cfg.data.groups, cfg.data.ss_fraction, cfg.seed,
                         cfg.data.threshold_ss, cfg.data.threshold_ds)
    manifest = cfg.resolve(cfg.paths.manifest)
    digest = write_manifest(manifest, gs.candidates)
    summary = {"seed": cfg.seed, "manifest": str(manifest), "sha256": digest, **gs.counts(),
               "sources": len(sources) - len(failures), "failed_sources": failures}
    Path(str(manifest) + ".summary.json").write_text(
        json.dumps({**summary, "timing": {"finished": time.time(), "seconds": time.time() - t0}}, indent=1) + "\n")
    _emit(summary)
    if not gs.retained:
        raise DataError("no groups survived the outlier filter")
    return 0


# -- training ---------------------------------------------------------------

def cmd_train_stage1(cfg: RunConfig, args) -> int:
    cfg.require("corpus", "manifest")
    corpus = Corpus.open(cfg.resolve(cfg.paths.corpus))
    groups = read_manifest(cfg.resolve(cfg.paths.manifest), status="retained")
    if not groups:
        raise ConfigurationError("manifest holds no retained groups")
    run_dir = cfg.resolve(cfg.paths.runs) / f"stage1_{cfg.mode}"
    res = train_stage1(corpus, groups, cfg.train_config(1), cfg.mode, cfg.profile, run_dir,
                       resume=not args.fresh, extra={"manifest_sha256": manifest_sha256(cfg)})
    _emit({"seed": cfg.seed, "run_dir": str(res.run_dir), "checkpoint": str(res.checkpoint), "losses": res.losses})
    return 0


def manifest_sha256(cfg: RunConfig) -> str:
    return file_sha256(cfg.resolve(cfg.paths.manifest))


def _read_stage2_table(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    need = {"sequence_id", "database_id", "subjective_score", "distorted"}
    if not rows or not need <= set(rows[0]):
        raise DataError(f"{path}: needs columns {sorted(need)} (plus reference in FR mode)")
    return rows


def _clip(base: Path, value: str | None, sequence_id: str | None = None):
    if not value:
        return None
    p = Path(value)
    return load_video(p if p.is_absolute() else base / p, sequence_id=sequence_id)


def cmd_train_stage2(cfg: RunConfig, args) -> int:
    ckpt = cfg.resolve(cfg.paths.stage1_checkpoint)
    if ckpt is None or not ckpt.exists():
        raise ConfigurationError("Stage-2 training needs an existing paths.stage1_checkpoint")
    cfg.require("stage2_data")
    pqa = checkpoint.load_pqanet(ckpt)
    if pqa.mode != cfg.mode:
        raise ConfigurationError(f"Stage-1 checkpoint is {pqa.mode}, config mode is {cfg.mode}")
    table = cfg.resolve(cfg.paths.stage2_data)
    samples = []
    for row in _read_stage2_table(table):
        rec = SubjectiveRecord(row["sequence_id"], float(row["subjective_score"]), row["database_id"],
                               row.get("source_id") or None)
        dist = _clip(table.parent, row["distorted"], rec.sequence_id)
        ref = _clip(table.parent, row.get("reference"), rec.sequence_id) if cfg.mode == "FR" else None
        if cfg.mode == "FR" and ref is None:
            raise DataError(f"{rec.sequence_id}: FR training rows need a reference clip")
        inp = sequence_inputs(pqa, dist, ref)
        samples.append(SequenceSample(rec, inp.quality_tensor().values, inp.feature_tensor().values))
    run_dir = cfg.resolve(cfg.paths.runs) / f"stage2_{cfg.mode}"
    res = train_stage2(samples, cfg.train_config(2), run_dir=run_dir, resume=not args.fresh)
    bundle = run_dir / "model.pt"
    pm, pp = checkpoint.load_sections(ckpt)["pqanet"]
    checkpoint.save_sections(bundle, {"pqanet": (pm, pp),
                                      "stanet": ({**res.model.cfg.to_dict(), "seed": cfg.seed}, res.model.state_dict())})
    _emit({"seed": cfg.seed, "run_dir": str(run_dir), "checkpoint": str(res.checkpoint), "bundle": str(bundle),
           "losses": res.losses})
    return 0


# -- scoring ----------------------------------------------------------------

def _raw_format(args) -> RawFormat | None:
    if args.width is None and args.height is None:
        return None
    if args.width is None or args.height is None:
        raise UsageError("--width and --height go together")
    return RawFormat(args.width, args.height, args.bit_depth, args.chroma)


def cmd_score(cfg: RunConfig, args) -> int:
    mode = (args.mode or cfg.mode).upper()
    refs = args.reference or []
    if mode == "FR" and not refs:
        raise ModeError("FR scoring requires --reference")
    if mode == "NR" and refs:
        raise ModeError("NR scoring does not accept --reference")
    if refs and len(refs) != len(args.videos):
        raise UsageError(f"{len(args.videos)} videos but {len(refs)} references")
    pqa_path = args.pqa or args.checkpoint
    sta_path = args.sta or args.checkpoint
    if not pqa_path or not sta_path:
        raise UsageError("give --checkpoint, or both --pqa and --sta")
    pqa = checkpoint.load_pqanet(pqa_path)
    sta = checkpoint.load_stanet(sta_path)
    if pqa.mode != mode:
        raise ConfigurationError(f"checkpoint is {pqa.mode} but scoring mode is {mode}")
    fmt = _raw_format(args)
    results = []
    for i, path in enumerate(args.videos):
        dist = load_video(path, fmt)
        ref = load_video(refs[i], fmt) if refs else None
        results.append(score_sequence(dist, pqa, sta, ref))
    if args.output:
        write_scores(args.output, results)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["sequence_id", "score"])
        for r in results:
            w.writerow([r.sequence_id, repr(r.score)])
    if args.patch_scores:
        write_patch_scores(args.patch_scores, results)
    return 0


# -- evaluation -------------------------------------------------------------

def cmd_evaluate(cfg: RunConfig, args) -> int:
    subjective = evalkit.read_subjective(args.subjective)
    preds: dict[str, dict[str, float]] = {}
    for p in args.predictions:
        for name, values in evalkit.read_prediction_columns(p).items():
            key = name if name not in preds else f"{Path(p).stem}:{name}"
            preds[key] = values
    joined, missing = evalkit.join_predictions(preds, subjective)
    if missing:
        print(f"warning: excluded {len(missing)} unjoinable sequence ids: {', '.join(missing[:20])}", file=sys.stderr)
    if not any(joined.values()):
        raise DataError("no predictions could be joined to subjective scores")
    report = evalkit.evaluate(joined, five_parameter=args.five_parameter)
    report.notes.extend(f"excluded unjoinable id {sid}" for sid in missing)
    if args.output:
        Path(args.output).write_text(report.to_json() + "\n")
    sys.stdout.write(report.table())
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"YAML or JSON run config (default: ${ENV_VAR})")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a config field, e.g. train.epochs=2 (repeatable)")
    common.add_argument("--threads", type=int, help="intra-op thread count")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vqapipe", description="ranking-trained two-stage video quality assessment")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", parents=[common], help="build a patch corpus and group manifest")
    g.set_defaults(fn=cmd_gen_dataset)

    for stage, fn in ((1, cmd_train_stage1), (2, cmd_train_stage2)):
        t = sub.add_parser(f"train-stage{stage}", parents=[common], help=f"train Stage {stage}")
        t.add_argument("--fresh", action="store_true", help="discard an existing run instead of resuming")
        t.set_defaults(fn=fn)

    s = sub.add_parser("score", parents=[common], help="score distorted sequences")
    s.add_argument("videos", nargs="+", help="distorted raw clips")
    s.add_argument("--reference", action="append", help="reference clip, one per video in order (FR)")
    s.add_argument("--mode", choices=["FR", "NR", "fr", "nr"])
    s.add_argument("--checkpoint", help="archive holding both network sections")
    s.add_argument("--pqa", help="patch network checkpoint")
    s.add_argument("--sta", help="aggregation network checkpoint")
    s.add_argument("--output", help="CSV path for sequence scores (default stdout)")
    s.add_argument("--patch-scores", help="CSV path for per-patch scores")
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--bit-depth", type=int, default=8)
    s.add_argument("--chroma", default="420", choices=["420", "444"])
    s.set_defaults(fn=cmd_score)

    e = sub.add_parser("evaluate", parents=[common], help="correlation report against subjective scores")
    e.add_argument("--predictions", action="append", required=True, help="prediction CSV (repeatable)")
    e.add_argument("--subjective", required=True, help="subjective score CSV")
    e.add_argument("--output", help="write the structured report as JSON")
    e.add_argument("--five-parameter", action="store_true", help="use the 5-parameter logistic")
    e.set_defaults(fn=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.override)
        if args.threads:
            overrides.append(f"threads={args.threads}")
        cfg = load_config(args.config, overrides)
        torch.set_num_threads(cfg.threads)
        if args.verbose:
            log.info("configuration:\n%s", dump_config(cfg))
        return args.fn(cfg, args)
    except VQAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        transcript = getattr(exc, "transcript", "")
        if transcript:
            print(transcript, file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
