#!/usr/bin/env python3
"""Desk-scale comparative experiment: generate the synthetic corpus, train
all three variants under one seed, then export heatmap overlays from the
best attention checkpoint.

Usage: python scripts/run_desk_experiment.py [--out DIR] [--epochs N]
"""

import argparse
import os
import sys

from shipnet.cli import main as shipnet


def run(argv):
    code = shipnet(argv)
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="desk_experiment")
    parser.add_argument("--epochs", default="15")
    parser.add_argument("--per-class", default="250")
    parser.add_argument("--seed", default="42")
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()

    data_dir = os.path.join(args.out, "data")
    cmp_dir = os.path.join(args.out, "compare")
    force = ["--force"] if args.force else []

    run(["gen-synth", "--per-class", args.per_class, "--size", "64",
         "--seed", args.seed, "--out", data_dir] + force)
    run(["compare", "--data", data_dir, "--out", cmp_dir, "--preset", "tiny",
         "--epochs", args.epochs, "--batch-size", "32", "--lr", "1e-3",
         "--seed", args.seed] + force)

    marker = open(os.path.join(cmp_dir, "cbam", "checkpoints", "best.txt")).read()
    best_epoch = int(marker.splitlines()[0].split("=")[1])
    ckpt = os.path.join(cmp_dir, "cbam", "checkpoints", f"epoch_{best_epoch:03d}.ckpt")
    for method in ("spatial-gate", "gradcam"):
        run(["heatmap", "--checkpoint", ckpt,
             "--image", os.path.join(data_dir, "oil_tanker"),
             "--method", method,
             "--out", os.path.join(args.out, f"heatmaps_{method}")])

    print(f"\ndone; see {cmp_dir}/compare.tsv and {args.out}/heatmaps_*/")


if __name__ == "__main__":
    main()
