"""``balnorm aggregate``: median and interquartile bands over per-seed metrics CSVs."""

import argparse
from pathlib import Path

from rich.console import Console
from rich.table import Table

from ..metrics import aggregate, read_metrics_csv, write_aggregate_csv


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "aggregate",
        help="combine metrics CSVs into percentile bands",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("paths", nargs="+", help="per-run metrics CSV files")
    parser.add_argument("--out", required=True, help="aggregate CSV to write")
    parser.set_defaults(run=run)


def run(args: argparse.Namespace) -> int:
    runs = {path: read_metrics_csv(path) for path in args.paths}
    band = aggregate(runs)
    write_aggregate_csv(band, Path(args.out))

    table = Table(title=f"Median of {band.run_count} runs (p25-p75)")
    for column in ("epoch", "train loss", "test loss", "test acc"):
        table.add_column(column)
    for i, epoch in enumerate(band.epochs):
        cells = []
        for metric in ("train_loss", "test_loss", "test_acc"):
            b = band.bands[metric]
            cells.append(f"{b['p50'][i]:.4f} ({b['p25'][i]:.4f}-{b['p75'][i]:.4f})")
        table.add_row(str(epoch), *cells)
    Console().print(table)
    return 0
