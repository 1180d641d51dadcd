#!/usr/bin/env python3
"""
Export a synthetic blob dataset as BNT1 files

Writes train_images.bnt1, train_labels.bnt1, test_images.bnt1 and
test_labels.bnt1 into the output directory, ready for ``--dataset bnt1:<dir>``.

Usage:
    python make_synth_bnt1.py <out_dir> [n_train] [classes] [seed]
"""
import sys
from pathlib import Path

from loguru import logger

from balnorm.data import synth_blobs
from balnorm.tensor import save_bnt1


def export(out_dir: Path, n_train: int, classes: int, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {
        "train": synth_blobs(n_train, classes, seed),
        "test": synth_blobs(max(classes, n_train // 5), classes, seed + 1_000_003),
    }
    for split, dataset in splits.items():
        save_bnt1(out_dir / f"{split}_images.bnt1", dataset.images)
        save_bnt1(out_dir / f"{split}_labels.bnt1", dataset.labels)
        logger.info(f"Wrote {len(dataset)} {split} instances to {out_dir}")


def main():
    if len(sys.argv) < 2:
        print("Usage: python make_synth_bnt1.py <out_dir> [n_train] [classes] [seed]")
        sys.exit(1)
    out_dir = Path(sys.argv[1])
    n_train = int(sys.argv[2]) if len(sys.argv) > 2 else 4000
    classes = int(sys.argv[3]) if len(sys.argv) > 3 else 4
    seed = int(sys.argv[4]) if len(sys.argv) > 4 else 0
    export(out_dir, n_train, classes, seed)


if __name__ == "__main__":
    main()
