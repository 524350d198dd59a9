#!/usr/bin/env python3
"""
Command-line entry point.

    python ost.py gradcheck
    python ost.py synth --seed 7 --frames 20 --out data/seq7
    python ost.py train --data data/ --out runs/a
    python ost.py track --checkpoint runs/a/checkpoint --data data/ --out runs/a/preds.jsonl
    python ost.py eval --preds runs/a/preds.jsonl --data data/ --out runs/a/metrics.json
    python ost.py bench --out runs/a/cost.json
    python ost.py splits --data kitti/ --setting 1
"""

import argparse
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

import config as config_module
from data_io import CATEGORY_SIZES, class_specific_split, dataset_splits, load_dataset, save_sequence, synth_sequence
from evaluation import EvalConfig, count_params_flops, evaluate, run_class_agnostic
from model import ModelConfig, ModelParams, model_gradcheck
from point_ops import point_grad_cases
from reports import format_cost_report, format_gradcheck_table, format_metric_report, write_json
from tensor_core import core_grad_cases, run_grad_cases
from tracker import read_track_results, track_sequences, write_track_results
from training import train

logger = logging.getLogger("ost")


def _select_training(args, cfg, sequences: list) -> list:
    if args.split == "class-agnostic":
        return dataset_splits(args.setting, sequences).train
    if args.category:
        return class_specific_split(sequences, args.category).train
    return sequences


def cmd_gradcheck(args, cfg) -> int:
    rng = np.random.default_rng(args.seed)
    cases = core_grad_cases(rng) + point_grad_cases(rng)
    reports = run_grad_cases(cases, seed=args.seed, n_points=args.points)
    if not args.skip_model:
        reports += model_gradcheck(ModelConfig.desk(), seed=args.seed)
    print(format_gradcheck_table(reports))
    if args.out:
        write_json(args.out, {"reports": [asdict(r) for r in reports]})
    return 0 if all(r.passed for r in reports) else 1


def cmd_synth(args, cfg) -> int:
    base = replace(cfg.synth, seed=args.seed, n_frames=args.frames or cfg.synth.n_frames)
    if args.category:
        base = replace(base, category=args.category, size=CATEGORY_SIZES.get(args.category, base.size))
    for i in range(args.count):
        synth_cfg = replace(base, seed=base.seed + i)
        target = args.out if args.count == 1 else os.path.join(args.out, f"seq_{synth_cfg.seed:04d}")
        save_sequence(synth_sequence(synth_cfg), target, synth_cfg)
        print(f"✅ wrote {target}")
    return 0


def cmd_train(args, cfg) -> int:
    sequences = _select_training(args, cfg, load_dataset(args.data))
    train_cfg = replace(cfg.train, seed=args.seed, steps=args.steps or cfg.train.steps,
                        workers=config_module.worker_count() if cfg.train.workers <= 0 else cfg.train.workers)
    setting = args.setting if args.split == "class-agnostic" else None
    outcome = train(cfg.model, cfg.loss, train_cfg, sequences, args.out, resume_from=args.checkpoint,
                    setting=setting)
    last = outcome.history[-1].total if outcome.history else float("nan")
    print(f"✅ trained to step {train_cfg.steps}, final loss {last:.4f}; checkpoint at {outcome.checkpoint_dir}")
    return 0


def cmd_track(args, cfg) -> int:
    params, _, _ = ModelParams.load(args.checkpoint)
    sequences = load_dataset(args.data)
    tracker_cfg = replace(cfg.tracker, seed=args.seed)
    results = track_sequences(params, sequences, tracker_cfg, params.config, config_module.worker_count())
    write_track_results(results, args.out)
    print(f"✅ wrote {sum(len(r.boxes) for r in results)} predictions for {len(results)} sequences to {args.out}")
    return 0


def cmd_eval(args, cfg) -> int:
    eval_cfg = replace(cfg.eval, iou_mode=args.iou or cfg.eval.iou_mode)
    sequences = load_dataset(args.data)
    if args.split == "class-agnostic":
        if not args.checkpoint:
            raise ValueError("class-agnostic evaluation needs --checkpoint")
        params, _, _ = ModelParams.load(args.checkpoint)
        manifest = args.manifest or os.path.dirname(os.path.abspath(args.checkpoint))
        report = run_class_agnostic(args.setting, params, sequences, manifest, replace(cfg.tracker, seed=args.seed),
                                    eval_cfg, config_module.worker_count())
        for pool in ("observed", "unseen"):
            pool_report = getattr(report, pool)
            print(format_metric_report(pool_report, pool) if pool_report else f"⚠️  {pool}: empty pool")
        payload = report.to_dict()
    else:
        if not args.preds:
            raise ValueError("eval needs --preds (or --split class-agnostic with --checkpoint)")
        preds = read_track_results(args.preds)
        wanted = {p.seq_id for p in preds}
        report = evaluate(preds, [s for s in sequences if s.id in wanted], eval_cfg)
        print(format_metric_report(report))
        payload = report.to_dict()
    if args.out:
        write_json(args.out, payload)
    return 0


def cmd_bench(args, cfg) -> int:
    model_cfg = ModelConfig.desk() if args.desk else cfg.model
    params = ModelParams.load(args.checkpoint, model_cfg)[0] if args.checkpoint else None
    report = count_params_flops(model_cfg, runs=args.runs, params=params)
    print(format_cost_report(report))
    if args.out:
        write_json(args.out, report.to_dict())
    return 0


def cmd_splits(args, cfg) -> int:
    sequences = load_dataset(args.data)
    if args.split == "class-agnostic":
        result = dataset_splits(args.setting, sequences)
    else:
        if not args.category:
            raise ValueError("class-specific splits need --category")
        result = class_specific_split(sequences, args.category)
    for pool in ("train", "observed_test", "unseen_test", "validation", "excluded"):
        seqs = getattr(result, pool)
        categories = sorted({s.category for s in seqs})
        frames = sum(len(s) for s in seqs)
        print(f"{pool:<14} {len(seqs):5d} sequences {frames:7d} frames  {categories}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ost", description="One-stream 3D single object tracking")
    parser.add_argument("--config", default=None, help="TOML config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op and the model")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--skip-model", action="store_true")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("synth", help="write synthetic sequence directories")
    p.add_argument("--frames", type=int)
    p.add_argument("--category")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    def add_split_flags(p):
        p.add_argument("--setting", choices=["1", "2"], default="1")
        p.add_argument("--split", choices=["class-specific", "class-agnostic"], default="class-specific")
        p.add_argument("--category")

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint", help="resume from this checkpoint directory")
    add_split_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("track", help="run one-pass tracking and write JSON-lines predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_track)

    p = sub.add_parser("eval", help="Success/Precision of predictions, or the class-agnostic protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--preds")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", help="training manifest (default: next to the checkpoint)")
    p.add_argument("--iou", choices=["3d", "bev"])
    p.add_argument("--out")
    add_split_flags(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench", help="parameter count, FLOPs and latency")
    p.add_argument("--checkpoint")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--desk", action="store_true", help="use the reduced desk-scale model")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("splits", help="show split pools for a dataset")
    p.add_argument("--data", required=True)
    add_split_flags(p)
    p.set_defaults(handler=cmd_splits)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level or config_module.log_level(), format=config_module.LOG_FORMAT)
    try:
        cfg = config_module.load_config(args.config)
        return args.handler(args, cfg)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
