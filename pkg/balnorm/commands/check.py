"""``balnorm check``: run the invariant suite over random configurations."""

import argparse

from loguru import logger
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from ..config import PADDING_CHOICES
from ..invariants import INJECT_CHOICES, Status, run_invariant_suite

STATUS_STYLES = {
    Status.PASS: "green",
    Status.FAIL: "bold red",
    Status.APPROXIMATE: "yellow",
    Status.EXPECTED_FAILURE: "cyan",
}


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "check",
        help="run the invariant suite",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--n", type=int, default=100, help="random configurations per check")
    parser.add_argument("--seed", type=int, default=0, help="suite seed")
    parser.add_argument("--padding", choices=PADDING_CHOICES, default="cyclic", help="padding mode under test")
    parser.add_argument("--inject", choices=INJECT_CHOICES, default=None, help="exercise a failure path")
    parser.set_defaults(run=run)


def run(args: argparse.Namespace) -> int:
    results = run_invariant_suite(args.n, args.seed, args.padding, args.inject)

    table = Table(title=f"Invariant suite (n={args.n}, seed={args.seed}, padding={args.padding})")
    for column in ("invariant", "status", "measured", "threshold", "trials", "detail"):
        table.add_column(column)
    for r in results:
        table.add_row(
            r.name,
            f"[{STATUS_STYLES[r.status]}]{r.status.value}[/]",
            f"{r.measured:.3e}",
            f"{r.threshold:.1e}",
            str(r.trials),
            escape(r.detail),
        )
    Console().print(table)

    failed = [r for r in results if r.failed]
    if failed:
        logger.error(f"Invariant failed: {failed[0].name} ({failed[0].detail or 'no detail'})")
        return 1
    return 0
