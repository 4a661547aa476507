#!/usr/bin/env python3
'''
Command-line entry point.

Usage:
    python main.py train --config configs/cbn_bs2_k8.json --seed 1 --out runs/cbn-s1
    python main.py train --config configs/cbn_bs2_k8.json --resume runs/cbn-s1/checkpoint.pkl
    python main.py compare runs/bn-s1 runs/bn-s2 runs/cbn-s1 runs/cbn-s2 --out summary.csv
    python main.py diagnose --config configs/synthetic.json
'''

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from rich.console import Console
from rich.table import Table

import config
from errors import CbnError
from harness import compare, load_config, train

console = Console()


def _with_overrides(cfg, args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if getattr(args, "no_progress", False):
        overrides["progress"] = False
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def cmd_train(args):
    cfg = _with_overrides(load_config(args.config), args)

    print("=" * 60)
    print(f"Training {cfg.name}")
    print("=" * 60)
    print(f"Model: {cfg.model} on {cfg.dataset.kind}")
    print(f"Normalizer: {cfg.normalizer.kind}, window {cfg.window}, burn-in {cfg.normalizer.burn_in_epochs} epochs")
    print(f"Batch size: {cfg.batch_size}, epochs: {cfg.epochs}, lr: {cfg.lr} ({cfg.lr_schedule})")
    print(f"Seed: {cfg.seed}")
    print(f"Output directory: {cfg.out_dir}")
    if args.resume:
        print(f"Resuming from: {args.resume}")
    print("=" * 60)

    start_time = time.time()
    try:
        result = train(cfg, resume=args.resume, max_steps=args.max_steps)
    except KeyboardInterrupt:
        print("\n\nTraining interrupted by user!")
        print(f"Checkpoint saved to {Path(cfg.out_dir) / config.CHECKPOINT_FILENAME}")
        return 130
    elapsed = time.time() - start_time

    print("\n" + "=" * 60)
    print("Training Complete!" if result.completed else "Stopped at --max-steps")
    print("=" * 60)
    evals = [r for r in result.rows if r.split == "eval"]
    if evals:
        print(f"Final eval accuracy: {evals[-1].accuracy:.4f}")
        print(f"Final eval loss: {evals[-1].loss:.6f}")
    print(f"Time elapsed: {elapsed:.2f} seconds")
    print(f"Metrics: {result.metrics_path}")
    print(f"Checkpoint: {result.checkpoint_path}")
    return 0


def cmd_compare(args):
    out = args.out or config.SUMMARY_FILENAME
    summary = compare(args.runs, out_path=out)
    last = {}
    for row in summary:
        last[row.method] = row

    table = Table(title=f"final epoch ({len(args.runs)} runs)")
    table.add_column("method")
    table.add_column("runs", justify="right")
    table.add_column("epoch", justify="right")
    table.add_column("eval accuracy", justify="right")
    table.add_column("eval loss", justify="right")
    for method, row in last.items():
        table.add_row(method, str(row.runs), str(row.epoch),
                      f"{100 * row.accuracy_mean:.2f} ± {100 * row.accuracy_std:.2f}",
                      f"{row.loss_mean:.4f} ± {row.loss_std:.4f}")
    console.print(table)
    print(f"Summary written to {out}")
    return 0


def cmd_diagnose(args):
    from diagnose import render_results, run_diagnose

    cfg = _with_overrides(load_config(args.config), args)
    print("=" * 60)
    print(f"Diagnostics for {cfg.name}")
    print("=" * 60)
    results = run_diagnose(cfg, checkpoint=args.checkpoint, quick=args.quick)
    console.print(render_results(results))
    print(f"Report written to {Path(cfg.out_dir) / config.DIAGNOSE_FILENAME}")
    return 0 if all(r.passed for r in results) else 1


def build_parser():
    parser = argparse.ArgumentParser(description="Cross-iteration batch normalization experiments")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train one configuration")
    p.add_argument("--config", required=True, help="JSON experiment file")
    p.add_argument("--seed", type=int, default=None, help="Override the seed in the config")
    p.add_argument("--out", default=None, help="Override the output directory")
    p.add_argument("--resume", default=None, help="Checkpoint to continue from")
    p.add_argument("--max-steps", type=int, default=None, help="Stop after this many optimizer steps")
    p.add_argument("--no-progress", action="store_true", help="Hide the progress bar")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="Summarize finished runs")
    p.add_argument("runs", nargs="+", help="Run directories")
    p.add_argument("--out", default=None, help=f"Summary CSV (default: {config.SUMMARY_FILENAME})")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("diagnose", help="Run the oracle and diagnostic checks")
    p.add_argument("--config", required=True, help="JSON experiment file")
    p.add_argument("--checkpoint", default=None, help="Trained checkpoint for the gradient-ratio check")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--quick", action="store_true", help="Smaller case counts")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    try:
        return args.func(args)
    except (CbnError, OSError) as e:
        print(f"\nError: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
