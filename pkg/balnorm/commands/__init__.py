"""
Command registry - one module per subcommand, each exposing ``register`` and ``run``.
"""

from . import aggregate, check, gradcheck, train

command_modules = [
    train,
    check,
    gradcheck,
    aggregate,
]
