#!/usr/bin/env python3
"""Run the full pipeline end to end on the default tiny configuration.

Equivalent to:

    trace gen --config cfg.json
    trace pretrain --config cfg.json
    trace align --config cfg.json
    trace index --config cfg.json
    trace retrieve --config cfg.json
    trace rag --config cfg.json
    trace eval --config cfg.json

Usage: python scripts/run_pipeline.py [out_dir] [--seed N]
"""

import argparse
import sys
import time

from tracemm.cli import main as trace_main


def run() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", nargs="?", default="runs/pipeline")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", default=None)
    args = parser.parse_args()

    common = ["--out", args.out_dir, "--seed", str(args.seed)]
    if args.config:
        common += ["--config", args.config]
    started = time.time()
    for command in ("gen", "pretrain", "align", "index", "retrieve", "rag", "eval"):
        status = trace_main([command, *common])
        if status != 0:
            print(f"{command} failed with status {status}", file=sys.stderr)
            return status
    print(f"pipeline finished in {time.time() - started:.1f}s; artifacts in {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
