#!/usr/bin/env python3
"""End-to-end run through the CLI: data, RGB-only stage, full model, evaluation.

Uses the files in configs/. Pass --iters to shorten both training stages.
"""

import argparse
import sys

from rgbd_uda.cli import main as cli


def run(*argv):
    code = cli(list(argv))
    if code:
        sys.exit(code)


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--iters", type=int, default=2000)
    args = p.parse_args()
    it = f"total_iters={args.iters}"
    run("make-toy", "--spec", "configs/toy_spec.txt", "--out", "runs/toy_data")
    run("-v", "train", "--config", "configs/toy_rgb.txt", "--set", it)
    run("-v", "train", "--config", "configs/toy_full.txt", "--set", it)
    for name in ("toy_rgb", "toy_full"):
        run("eval", "--ckpt", f"runs/{name}/latest.ckpt", "--data", "runs/toy_data/target",
            "--out", f"runs/{name}/metrics.json")


if __name__ == "__main__":
    main()
