"""Command-line entry points: synth, pairs, pretrain, train, eval, aggregate, plot."""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import datagen, harness
from .datagen import SynthConfig, build_pairs, load_manifest, load_pairs, save_pairs, synth_corpus
from .encoders import EncoderConfig
from .features import load_lexicon
from .harness import TrainConfig
from .model import load_detector
from .speech_embedder import EmbedderConfig, load_embedder, pretrain_ctc, save_embedder

log = logging.getLogger(__name__)


def _dataclass_from_dict(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
    return cls(**kwargs)


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _manifest_items(records, manifest_dir):
    return [
        (datagen.load_features(rec, manifest_dir), np.asarray(rec.phoneme_ids, dtype=np.int64))
        for rec in records
    ]


def cmd_synth(args) -> None:
    cfg = _dataclass_from_dict(SynthConfig, _load_json(args.config)) if args.config else SynthConfig()
    records = synth_corpus(cfg, args.out)
    print(f"wrote {len(records)} utterances to {args.out}")


def cmd_pairs(args) -> None:
    records = load_manifest(args.manifest)
    if args.split:
        records = [r for r in records if r.split == args.split]
    pairs = build_pairs(
        records,
        hard_threshold=args.hard_threshold,
        easy_threshold=args.easy_threshold,
        mode=args.mode,
        negatives_per_class=args.negatives_per_class,
        seed=args.seed,
    )
    save_pairs(pairs, args.out)
    n_neg = sum(1 for p in pairs if p.label == 0)
    print(f"wrote {len(pairs)} pairs ({len(pairs) - n_neg} positive, {n_neg} negative) to {args.out}")


def cmd_pretrain(args) -> None:
    cfg = _load_json(args.config)
    manifest = Path(cfg["manifest"])
    manifest_dir = manifest.parent
    records = load_manifest(manifest)
    split = cfg.get("split", "train")
    records = [r for r in records if r.split == split]
    lexicon = load_lexicon(manifest_dir / "lexicon.txt")
    embedder_cfg = _dataclass_from_dict(
        EmbedderConfig, {"inventory_size": lexicon.inventory_size, **cfg.get("embedder", {})}
    )
    finetune_items = None
    if cfg.get("finetune_manifest"):
        ft = Path(cfg["finetune_manifest"])
        finetune_items = _manifest_items(load_manifest(ft), ft.parent)
    model, history = pretrain_ctc(
        _manifest_items(records, manifest_dir),
        embedder_cfg,
        seed=cfg.get("seed", 0),
        epochs=cfg.get("epochs", 30),
        batch_size=cfg.get("batch_size", 32),
        learning_rate=cfg.get("learning_rate", 3e-4),
        finetune_corpus=finetune_items,
        finetune_epochs=cfg.get("finetune_epochs", 0),
    )
    save_embedder(model, args.out, seed=cfg.get("seed", 0), epoch=len(history))
    print(f"pretrained {len(history)} epochs, final CTC loss {history[-1]:.4f}; saved {args.out}")


def cmd_train(args) -> None:
    cfg = _load_json(args.config)
    manifest = Path(cfg["manifest"])
    manifest_dir = manifest.parent
    records = load_manifest(manifest)
    lexicon = load_lexicon(manifest_dir / "lexicon.txt")
    embedder = load_embedder(cfg["embedder_checkpoint"])

    select_on_test = bool(cfg.get("select_on_test", False)) or args.select_on_test
    pairs_path = cfg["test_pairs"] if select_on_test else cfg["valid_pairs"]
    if select_on_test:
        log.warning("selecting checkpoints on the TEST pairs, as the original protocol does")
    selection_pairs = load_pairs(pairs_path)
    selection_ids = {p.audio_id for p in selection_pairs}
    selection_records = [r for r in records if r.id in selection_ids]

    train_cfg = _dataclass_from_dict(TrainConfig, cfg.get("train", {}))
    encoder_cfg = _dataclass_from_dict(EncoderConfig, cfg.get("encoder", {}))
    result = harness.train(
        embedder,
        [r for r in records if r.split == "train"],
        selection_pairs,
        selection_records,
        manifest_dir,
        lexicon,
        train_cfg,
        args.out,
        encoder_cfg=encoder_cfg,
    )
    print(
        f"best epoch {result.best_epoch} with selection EER {result.best_eer:.2f}%; "
        f"checkpoint {result.best_path}"
    )


def cmd_eval(args) -> None:
    manifest = Path(args.manifest)
    records = load_manifest(manifest)
    lexicon = load_lexicon(manifest.parent / "lexicon.txt")
    model = load_detector(args.checkpoint)
    pairs = load_pairs(args.pairs)
    pair_ids = {p.audio_id for p in pairs}
    pair_records = [r for r in records if r.id in pair_ids]
    scored = harness.score_pairs(
        model, pairs, pair_records, manifest.parent, lexicon, batch_size=args.batch_size
    )
    report = harness.evaluate_scored(scored, seed=args.seed)
    harness.save_report(report, args.report)
    for name, data in sorted(report["datasets"].items()):
        print(f"{name}: EER {data['eer']:.2f}%, AUC {data['auc']:.2f}% ({data['num_pairs']} pairs)")
    print(f"report written to {args.report}")


def cmd_aggregate(args) -> None:
    reports = [harness.load_report(p) for p in args.reports]
    agg = harness.aggregate_runs(reports)
    if args.out:
        harness.save_report(agg, args.out)
    if args.csv:
        harness.report_to_csv(agg, args.csv)
    for row in agg["table"]:
        print(row)


def cmd_plot(args) -> None:
    report = harness.load_report(args.report)
    history = None
    if args.log:
        history = []
        for line in Path(args.log).read_text().splitlines():
            entry = json.loads(line)
            if "epoch_summary" in entry:
                history.append(entry["epoch_summary"])
    harness.plot_report(report, args.out, history=history)
    print(f"plot written to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kws", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic keyword corpus")
    p.add_argument("--config", help="JSON file of synthesis knobs (defaults if omitted)")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pairs", help="build labeled evaluation pairs from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=["libriphrase", "anchor-all"], default="libriphrase")
    p.add_argument("--split", default="test", help="manifest split to pair (default test)")
    p.add_argument("--hard-threshold", type=int, default=2)
    p.add_argument("--easy-threshold", type=int, default=5)
    p.add_argument("--negatives-per-class", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("pretrain", help="pretrain the frame embedder with CTC")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the keyword detector")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument(
        "--select-on-test", action="store_true",
        help="select checkpoints by test-set EER (original protocol; unsound default)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score pairs and report EER/AUC")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="output report JSON")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("aggregate", help="aggregate reports across seeds (mean ± std)")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("plot", help="plot ROC (and loss curves) from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--log", help="train_log.jsonl for loss curves")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    args.func(args)


if __name__ == "__main__":
    main()
