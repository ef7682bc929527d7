"""``mmser`` command line: ingest, train, embed, fuse, eval and study.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 training failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict

from .base import ConfigError, TrainingError
from .dataset import ManifestError, class_count_table, generate_synthetic, save_manifest
from .embeddings import EMBEDDING_MODALITIES
from .evaluation import make_folds
from .fusion import ModalitySubset
from .iemocap import IngestError, build_iemocap_manifest
from .pipeline import (
    MODEL_NAMES,
    InputLoader,
    MissingArtifactError,
    RunConfig,
    embed_unimodal,
    evaluate,
    report_name,
    require_manifest,
    run_combination_study,
    step_context,
    train_fusion,
    train_unimodal,
    write_meta,
    write_report,
)

log = logging.getLogger("mmser")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_TRAINING = 0, 2, 3, 4


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(args.set or [])
    flags = {k: getattr(args, k) for k in ("artifact_dir", "manifest_path", "seed", "test_mode", "protocol", "plots")}
    return RunConfig.from_dict({**asdict(cfg), **{k: v for k, v in flags.items() if v is not None}})


def _modalities(choice: str) -> list[str]:
    return list(EMBEDDING_MODALITIES) if choice == "all" else [choice]


def cmd_ingest(args) -> str:
    cfg = _config(args)
    if (args.synthetic is None) == (args.iemocap is None):
        raise ConfigError("choose exactly one of --synthetic N or --iemocap ROOT")
    out = cfg.resolved_manifest_path
    if args.synthetic is not None:
        manifest = generate_synthetic(args.synthetic, int(cfg.seed))
    else:
        skips = out.with_name("skipped.tsv")
        manifest = build_iemocap_manifest(args.iemocap, label_rule=args.label_rule, skip_report_path=skips)
    save_manifest(manifest, out)
    write_meta(out.with_suffix(".meta.json"), {**cfg.provenance(), "source": manifest.source, "n_records": len(manifest)})
    return f"ingest: {len(manifest)} records, {class_count_table(manifest)} -> {out}"


def cmd_train(args) -> str:
    cfg = _config(args)
    manifest = require_manifest(cfg)
    loader = InputLoader(manifest)
    parts = []
    for fold in make_folds(manifest, cfg.eval_protocol):
        for m in _modalities(args.modality):
            with step_context(f"fold {fold.fold_id} {m}"):
                _, path, acc = train_unimodal(cfg, manifest, fold, m, loader)
            log.info("fold %d %s: train accuracy %.4f -> %s", fold.fold_id, m, acc, path)
            parts.append(f"{m}@fold{fold.fold_id}={acc:.4f}")
    return f"train: train accuracy {' '.join(parts)} -> {cfg.artifacts.root / 'checkpoints'}"


def cmd_embed(args) -> str:
    cfg = _config(args)
    manifest = require_manifest(cfg)
    loader = InputLoader(manifest)
    total = 0
    for fold in make_folds(manifest, cfg.eval_protocol):
        for m in _modalities(args.modality):
            total += embed_unimodal(cfg, fold, m, loader)
    return f"embed: {total} embeddings ({args.modality}) -> {cfg.artifacts.embeddings}"


def cmd_fuse(args) -> str:
    cfg = _config(args)
    subsets = [ModalitySubset.parse(s) for s in args.subset] if args.subset else cfg.fusion_subsets
    bad = [s.name for s in subsets if not s.is_fusion]
    if bad:
        raise ConfigError(f"fusion subsets need two or more modalities: {', '.join(bad)}")
    manifest = require_manifest(cfg)
    loader = InputLoader(manifest)
    parts = []
    for fold in make_folds(manifest, cfg.eval_protocol):
        for s in subsets:
            with step_context(f"fold {fold.fold_id} {s.name}"):
                _, _, acc = train_fusion(cfg, manifest, fold, s, loader)
            parts.append(f"{s.name}@fold{fold.fold_id}={acc:.4f}")
    return f"fuse: train accuracy {' '.join(parts)}"


def cmd_eval(args) -> str:
    cfg = _config(args)
    target = args.model if args.model in EMBEDDING_MODALITIES else ModalitySubset.parse(args.model).name
    manifest = require_manifest(cfg)
    report = evaluate(cfg, manifest, target)
    paths = write_report(cfg, manifest, report, report_name(target))
    return (
        f"eval: {MODEL_NAMES[target]} mean accuracy {100 * report.mean_accuracy:.2f}% "
        f"over {len(report.per_fold)} fold(s) -> {paths['metrics']}"
    )


def cmd_study(args) -> str:
    cfg = _config(args)
    manifest = require_manifest(cfg)
    study = run_combination_study(manifest, cfg.fusion_subsets, cfg.eval_protocol, cfg)
    out = cfg.artifacts.report("study")
    study.to_csv(out / "study.csv")
    (out / "study.txt").write_text(study.to_text(), encoding="utf-8")
    write_meta(out / "study.meta.json", {**cfg.provenance(), "protocol": cfg.protocol})
    for target, report in study.reports.items():
        write_report(cfg, manifest, report, report_name(target))
    best = max(study.rows, key=lambda r: r.accuracy)
    return f"study: {len(study.rows)} rows, best {best.model} {100 * best.accuracy:.2f}% -> {out / 'study.csv'}"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--artifact-dir", dest="artifact_dir", help="root of manifests/, checkpoints/, embeddings/, reports/")
    common.add_argument("--manifest", dest="manifest_path", help="manifest path (default <artifact-dir>/manifests/manifest.jsonl)")
    common.add_argument("--seed", type=int)
    common.add_argument("--protocol", choices=("holdout_session5", "loso_rotating"))
    common.add_argument(
        "--test-mode", dest="test_mode", action=argparse.BooleanOptionalAction, default=None,
        help="use tiny stand-in encoders and the desk-scale training profile",
    )
    common.add_argument("--plots", action=argparse.BooleanOptionalAction, default=None, help="also write PNG confusion plots")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. mocap.epochs=50")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mmser", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="write a manifest from IEMOCAP or the synthetic generator")
    p.add_argument("--synthetic", type=int, metavar="N", help="N utterances per class")
    p.add_argument("--iemocap", metavar="ROOT", help="IEMOCAP corpus root")
    p.add_argument("--label-rule", dest="label_rule", choices=("consensus", "majority"), default="consensus")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="train unimodal models for every fold")
    p.add_argument("--modality", choices=(*EMBEDDING_MODALITIES, "all"), default="all")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="fill the embedding cache from trained checkpoints")
    p.add_argument("--modality", choices=(*EMBEDDING_MODALITIES, "all"), default="all")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("fuse", parents=[common], help="train fusion heads on cached embeddings")
    p.add_argument("--subset", action="append", help="e.g. Sp+Tx or speech+text+mocap (repeatable)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", parents=[common], help="evaluate one model and write reports")
    p.add_argument("--model", default="Sp+Tx+MC", help="speech, text, mocap or a fusion subset such as Sp+Tx")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("study", parents=[common], help="unimodal and fusion combination table")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        print(args.func(args))
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ConfigError, ManifestError, IngestError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
