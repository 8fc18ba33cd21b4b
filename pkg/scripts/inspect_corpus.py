#!/usr/bin/env python3
"""Render a quick ASCII contact sheet of the synthetic corpus, one image
per class, to eyeball family separability without an image viewer.

Usage: python scripts/inspect_corpus.py DATA_DIR [--step 4]
"""

import argparse

from shipnet.data import scan_directory

CHARS = " .:-=+*#%@"


def ascii_art(img, step):
    gray = img.mean(axis=0)[::step, ::step]
    return "\n".join(
        "".join(CHARS[min(int(v * (len(CHARS) - 0.01)), len(CHARS) - 1)] for v in row)
        for row in gray)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("data_dir")
    parser.add_argument("--step", type=int, default=4)
    args = parser.parse_args()

    ds, _ = scan_directory(args.data_dir)
    seen = set()
    for sample in ds.samples:
        if sample.label in seen:
            continue
        seen.add(sample.label)
        print(f"\n== {ds.classes[sample.label]} ({sample.path})")
        print(ascii_art(sample.load(), args.step))


if __name__ == "__main__":
    main()
