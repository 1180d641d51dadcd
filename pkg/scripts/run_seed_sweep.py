#!/usr/bin/env python3
"""
Desk-scale comparison of normalization strategies over several seeds

Trains TinyNet once per (norm, seed), writes one metrics CSV per run and one
aggregate CSV per norm, then reports the median train loss at epoch 3 and at
the final epoch for each norm. Exits 1 unless BalNorm ends below the
unnormalized net and is ahead of BatchNorm at epoch 3.

Usage:
    python run_seed_sweep.py <out_dir> [dataset] [epochs] [seeds]

    dataset defaults to synth, epochs to 10, seeds to 5.
"""
import sys
from pathlib import Path

from loguru import logger

from balnorm.config import build_train_config
from balnorm.metrics import aggregate, convergence_ordering, write_aggregate_csv
from balnorm.training import train

NORMS = ["balnorm", "batchnorm", "none"]


def sweep(out_dir: Path, dataset: str, epochs: int, seeds: int) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    bands = {}
    for norm in NORMS:
        runs = {}
        for seed in range(seeds):
            csv_path = out_dir / f"{norm}_seed{seed}.csv"
            config = build_train_config(
                {"norm": norm, "dataset": dataset, "epochs": epochs, "seed": seed, "out": str(csv_path)}
            )
            logger.info(f"Run {norm} seed {seed}")
            runs[csv_path.name] = train(config)
        bands[norm] = aggregate(runs)
        write_aggregate_csv(bands[norm], out_dir / f"{norm}_aggregate.csv")
    return bands


def main():
    if len(sys.argv) < 2:
        print("Usage: python run_seed_sweep.py <out_dir> [dataset] [epochs] [seeds]")
        sys.exit(1)
    out_dir = Path(sys.argv[1])
    dataset = sys.argv[2] if len(sys.argv) > 2 else "synth"
    epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 10
    seeds = int(sys.argv[4]) if len(sys.argv) > 4 else 5

    bands = sweep(out_dir, dataset, epochs, seeds)
    early = min(3, epochs) - 1
    for norm, band in bands.items():
        median = band.bands["train_loss"]["p50"]
        logger.info(f"{norm}: median train loss epoch {early + 1} {median[early]:.4f}, final {median[-1]:.4f}")

    verdict = convergence_ordering(bands, early + 1)
    for check, held in verdict.items():
        logger.info(f"{check}: {'yes' if held else 'no'}")
    if not all(verdict.values()):
        sys.exit(1)


if __name__ == "__main__":
    main()
