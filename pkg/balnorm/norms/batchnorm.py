"""Batch normalization reference layer."""

from dataclasses import dataclass
from typing import BinaryIO, Optional, Union

import numpy as np

from ..autodiff import ArrayLike, Node, as_node
from ..errors import ConfigurationError, InsufficientBatch
from ..tensor import read_bnt1, write_bnt1
from .base import Mode

AXES = (0, 2, 3)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigurationError(f"batchnorm eps must be positive, got {self.eps}")
        if (np.asarray(self.running_var) < 0).any():
            raise ConfigurationError("batchnorm running variance must be non-negative")

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            eps=eps,
            momentum=momentum,
        )


def batchnorm_forward(
    x: Union[Node, ArrayLike],
    state: BatchNormState,
    mode: Union[Mode, str] = Mode.TRAIN,
    gamma: Optional[Node] = None,
    beta: Optional[Node] = None,
    update_stats: bool = True,
) -> Node:
    """Normalize each channel over batch and spatial positions, then apply gamma/beta.

    ``gamma``/``beta`` default to constants taken from ``state``; pass leaf nodes
    to train them. Train mode folds the batch moments into the running estimates
    (unbiased variance) unless ``update_stats`` is cleared.
    """
    x = as_node(x)
    mode = Mode(mode)
    gamma = as_node(state.gamma if gamma is None else gamma).reshape(1, -1, 1, 1)
    beta = as_node(state.beta if beta is None else beta).reshape(1, -1, 1, 1)

    if mode is Mode.EVAL:
        mean = state.running_mean.reshape(1, -1, 1, 1)
        scale = 1.0 / np.sqrt(state.running_var.reshape(1, -1, 1, 1) + state.eps)
        return (x - mean) * scale * gamma + beta

    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise InsufficientBatch(f"batch normalization needs at least two values per channel, got {count}")
    mean = x.mean(axis=AXES, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=AXES, keepdims=True)
    normalized = centered / (var + state.eps) ** 0.5

    if update_stats:
        m = state.momentum
        batch_var = var.value.reshape(-1) * count / (count - 1)
        state.running_mean = (1.0 - m) * state.running_mean + m * mean.value.reshape(-1)
        state.running_var = (1.0 - m) * state.running_var + m * batch_var
    return normalized * gamma + beta


def dump_batchnorm_state(stream: BinaryIO, state: BatchNormState) -> None:
    for record in (state.running_mean, state.running_var, state.gamma, state.beta):
        write_bnt1(stream, record)


def load_batchnorm_state(stream: BinaryIO, eps: float = 1e-5, momentum: float = 0.1) -> BatchNormState:
    running_mean, running_var, gamma, beta = (read_bnt1(stream) for _ in range(4))
    return BatchNormState(running_mean, running_var, gamma, beta, eps=eps, momentum=momentum)
