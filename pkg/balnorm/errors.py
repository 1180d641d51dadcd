"""Exception hierarchy for the BalNorm engine.

Configuration problems and numerical failures are kept in separate families so
the command line can map them onto distinct exit codes.
"""

from typing import Iterable, Optional


class BalNormError(Exception):
    """Root of every error raised by this package."""

    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.layer = layer

    def __str__(self) -> str:
        if self.layer:
            return f"[{self.layer}] {self.message}"
        return self.message


class ConfigurationError(BalNormError):
    """Invalid flags, config files, shapes or other caller-supplied structure."""


class NumericalError(BalNormError):
    """A computation produced, or would produce, an unusable value."""


class ShapeMismatchError(ConfigurationError):
    def __init__(self, what: str, expected, got):
        super().__init__(f"{what}: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class InvalidAxisError(ConfigurationError):
    pass


class ConvSpecError(ConfigurationError):
    pass


class EpochOutOfRangeError(ConfigurationError):
    pass


class MisalignedEpochsError(ConfigurationError):
    def __init__(self, runs: Iterable[str]):
        self.runs = list(runs)
        super().__init__(f"epoch grids differ from the first run in: {', '.join(self.runs)}")


class FormatError(ConfigurationError):
    pass


class TruncatedFileError(FormatError):
    def __init__(self, path: str, offset: int):
        super().__init__(f"{path}: truncated record at byte offset {offset}")
        self.path = path
        self.offset = offset


class LabelOutOfRangeError(FormatError):
    pass


class ImpossibleBalance(ConfigurationError):
    pass


class InsufficientBatch(ConfigurationError):
    pass


class NonScalarRootError(ConfigurationError):
    pass


class UninitializedStats(BalNormError):
    pass


class NonFiniteError(NumericalError):
    pass


class ZeroInputSum(NumericalError):
    pass


class DegenerateWeights(NumericalError):
    def __init__(self, channel: int, denominator: float, layer: Optional[str] = None):
        super().__init__(
            f"output channel {channel} has a non-positive balance denominator "
            f"({denominator:.3e}); weights are single-signed or vanishing",
            layer=layer,
        )
        self.channel = channel
        self.denominator = denominator
