"""
BalNorm engine

Command-line entry point. Thread caps are exported before numpy is imported so
BLAS pools honour ``BALNORM_THREADS``.
"""

import sys
from typing import List, Optional

from loguru import logger

from . import config

config.apply_thread_limits()

from .commands.registry import create_parser  # noqa: E402
from .errors import BalNormError, ConfigurationError, NumericalError  # noqa: E402

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def configure_logging(level: str) -> None:
    logger.remove()
    logger.configure(handlers=[{"sink": sys.stderr, "level": level}])


def main(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the chosen command and map errors onto exit codes."""
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(args.log_level)

    try:
        return args.run(args)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except NumericalError as e:
        logger.error(f"Numerical error: {e}")
        return EXIT_NUMERICAL
    except BalNormError as e:
        logger.error(f"Error: {e}")
        return EXIT_FAILURE


def start():
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    start()
