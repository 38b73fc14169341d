"""Command-line entry points for dataset generation, training, and studies."""

from __future__ import annotations

import argparse
import os
import sys

from . import harness
from .config import ExperimentConfig, parse_config


def _load_config(path, seed=None):
    cfg = ExperimentConfig() if path is None else parse_config(path)
    if seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, base_seed=seed)
    return cfg


def _add_common(sub):
    sub.add_argument("--config", default=None, help="INI config file (defaults used if omitted)")
    sub.add_argument("--seed", type=int, default=None, help="override base seed")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    sub.add_argument("--threads", type=int, default=None,
                     help="cap BLAS threads (set before numpy does heavy work)")


def _apply_threads(n):
    if n is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="slotlab")
    subs = parser.add_subparsers(dest="command", required=True)

    for name in ("generate", "train", "eval", "figure1", "sample-efficiency"):
        sub = subs.add_parser(name)
        _add_common(sub)
        if name == "eval":
            sub.add_argument("--checkpoint", required=True)
            sub.add_argument("--data", required=True, help="dataset splits directory")
        if name == "train":
            sub.add_argument("--data", default=None,
                             help="existing splits directory (generated if omitted)")
            sub.add_argument("--verbose", action="store_true")
        if name in ("figure1", "sample-efficiency"):
            sub.add_argument("--verbose", action="store_true")

    args = parser.parse_args(argv)
    _apply_threads(args.threads)
    cfg = _load_config(args.config, args.seed)

    if args.command == "generate":
        harness.generate_splits(cfg, args.out, force=args.force)
        print(f"wrote train/val/test splits under {args.out}")
    elif args.command == "train":
        harness.ensure_outdir(args.out, args.force)
        if args.data is not None:
            splits = harness.load_splits(args.data)
        else:
            splits = harness.generate_splits(cfg, os.path.join(args.out, "data"),
                                             force=args.force)
        _, report, record = harness.train_object_centric(cfg, splits, out_dir=args.out,
                                                         verbose=args.verbose)
        harness.append_results(os.path.join(args.out, "results.csv"),
                               f"train_seed{cfg.base_seed}", cfg.hash(), report)
        print(f"test mcc {report.mcc:.4f} ld {report.ld_r2:.4f} "
              f"({record.wall_clock:.0f}s)")
    elif args.command == "eval":
        from .model import load_checkpoint

        harness.ensure_outdir(args.out, args.force)
        model = load_checkpoint(args.checkpoint)
        splits = harness.load_splits(args.data)
        report = harness.evaluate_object_centric(model, splits["test"])
        harness.append_results(os.path.join(args.out, "results.csv"),
                               f"eval_seed{cfg.base_seed}", cfg.hash(), report)
        print(f"test mcc {report.mcc:.4f} ld {report.ld_r2:.4f}")
    elif args.command == "figure1":
        rows = harness.run_figure1(cfg, args.out, force=args.force, verbose=args.verbose)
        for method, k, score in rows:
            print(f"{method} k={k} mcc={score:.4f}")
    elif args.command == "sample-efficiency":
        rows, thresholds = harness.run_sample_efficiency(cfg, args.out, force=args.force,
                                                         verbose=args.verbose)
        for method, size in thresholds.items():
            print(f"{method} threshold crossing: {size}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
