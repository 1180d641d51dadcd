"""
Parser factory for creating and registering all subcommands.
"""

import argparse

from . import command_modules

LOG_LEVELS = ("TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR")


def create_parser() -> argparse.ArgumentParser:
    """
    Create and return the top-level parser with every subcommand registered.

    Returns:
        argparse.ArgumentParser: parser whose namespace carries ``run``, the
        handler of the chosen subcommand
    """
    parser = argparse.ArgumentParser(
        prog="balnorm",
        description="Balanced normalization engine: training, invariant checks, gradient checks, aggregation.",
    )
    parser.add_argument(
        "--log-level", default="INFO", choices=LOG_LEVELS, help="log verbosity on stderr (default: INFO)"
    )
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    for module in command_modules:
        module.register(subparsers)

    return parser
