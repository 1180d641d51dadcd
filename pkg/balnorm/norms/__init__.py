"""Normalization strategies applied around a convolution."""

from .balanced import (
    BalNormState,
    ChannelStats,
    NormGeometry,
    NormVariant,
    balanced_init,
    balnorm_transform,
)
from .base import Mode
from .batchnorm import BatchNormState, batchnorm_forward
from .identity import identity_forward

__all__ = [
    "Mode",
    "BalNormState",
    "ChannelStats",
    "NormGeometry",
    "NormVariant",
    "balanced_init",
    "balnorm_transform",
    "BatchNormState",
    "batchnorm_forward",
    "identity_forward",
]
