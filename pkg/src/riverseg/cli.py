"""Command-line entry point.

Subcommands: synth, dedup, merge, train, eval, predict, experiment, overlay,
summary. Failures print a single machine-parsable line to stderr and exit
nonzero; argparse usage errors exit 2.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from .config import RunConfig
from .experiment import experiment_matrix, comparison_tables, save_results
from .metrics import format_fraction, format_metrics_table
from .model import SegFormer, format_summary, named_config
from .overlay import render_overlay
from .synth import synth_generate
from .train import evaluate, predict, rebuild_from_checkpoint, train


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "out", None):
        cfg = cfg.replace(out_dir=args.out)
    if getattr(args, "data", None):
        cfg = cfg.replace(data_roots=[str(p) for p in args.data])
    return cfg


def cmd_synth(args) -> int:
    root = synth_generate(args.n, args.size, args.seed, args.out)
    manifest = D.load_manifest(root)
    print(f"wrote {len(manifest.samples)} samples to {root} "
          f"(splits {manifest.counts()})")
    return 0


def cmd_dedup(args) -> int:
    manifest = D.load_manifest(args.root)
    deduped = D.dedup_cross_split(manifest, mode=args.mode,
                                  hamming_threshold=args.hamming)
    if args.out:
        deduped.save(args.out)
    removed = len(deduped.dedup_report)
    print(f"removed {removed} duplicate(s); splits now {deduped.counts()}")
    for entry in deduped.dedup_report:
        print(f"  {entry['split']}: {entry['removed']} ~ {entry['matched_test']} "
              f"[{entry['reason']}]")
    return 0


def cmd_merge(args) -> int:
    manifests = [D.load_manifest(r) for r in args.roots]
    merged = D.merge_datasets(manifests, eval_source=args.eval_source,
                              dedup_mode=args.mode)
    if args.out:
        merged.save(args.out)
    print(f"merged {len(args.roots)} source(s): splits {merged.counts()}, "
          f"{len(merged.dedup_report)} duplicate(s) removed")
    return 0


def cmd_train(args) -> int:
    record = train(_load_config(args))
    iou = record.final_metrics.get("iou")
    print(f"trained {record.steps} steps; "
          f"{record.config['eval_split']} IoU {format_fraction(iou)}; "
          f"checkpoints in {Path(record.final_checkpoint).parent}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, args.data, split=args.split,
                      threshold=args.threshold, image_size=args.image_size)
    print(format_metrics_table([(Path(args.checkpoint).stem, report)]))
    return 0


def cmd_predict(args) -> int:
    mask = predict(args.checkpoint, args.image, args.out,
                   threshold=args.threshold, image_size=args.image_size)
    print(f"wrote {args.out} ({int(mask.sum())} water pixels)")
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    results = experiment_matrix(cfg, variants, seeds=seeds)
    iou_table, resource_table = comparison_tables(results)
    save_results(results, Path(cfg.out_dir))
    print(iou_table)
    print()
    print(resource_table)
    return 0


def cmd_overlay(args) -> int:
    image = D.load_image(args.image)
    pred = D.load_mask(args.pred)
    gt = D.load_mask(args.gt)
    out = render_overlay(image, pred, gt, alpha=args.alpha)
    Image.fromarray(out).save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_summary(args) -> int:
    if args.checkpoint:
        model = rebuild_from_checkpoint(args.checkpoint)
    else:
        model = SegFormer(named_config(args.model), seed=args.seed or 0)
    print(format_summary(model))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riverseg",
                                     description="binary water segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dedup", help="remove train/val duplicates of test images")
    p.add_argument("--root", required=True)
    p.add_argument("--mode", choices=("exact", "perceptual"), default="exact")
    p.add_argument("--hamming", type=int, default=5)
    p.add_argument("--out", help="write the deduplicated manifest JSON here")
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("merge", help="merge several dataset roots")
    p.add_argument("--roots", nargs="+", required=True)
    p.add_argument("--eval-source", dest="eval_source")
    p.add_argument("--mode", choices=("exact", "perceptual"), default="exact")
    p.add_argument("--out", help="write the merged manifest JSON here")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--data", nargs="+", help="override data roots")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write a binary mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="run the variant matrix")
    p.add_argument("--config", help="base RunConfig JSON file")
    p.add_argument("--variants", default="baseline,full",
                   help="comma list from: baseline,expansion,full,lora")
    p.add_argument("--seeds", help="comma list of seeds (default: config seed)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--data", nargs="+")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("overlay", help="render a TP/FP/FN color overlay")
    p.add_argument("--image", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("summary", help="dump the layer/parameter inventory")
    p.add_argument("--model", default="nano")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_summary)

    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
