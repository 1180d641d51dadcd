"""Balanced normalization of convolution weights.

The weights of a convolution are shifted by a per-output-channel bias ``b`` and
scaled by ``s`` before the convolution is applied::

    w''[d,c,j,k] = s[d] * (w[d,c,j,k] + b[d])

``b`` makes the layer output zero-mean over the batch and ``s`` makes the total
contribution of the positive shifted weights equal to ``r``. Both are computed
from the per-input-channel sums ``v`` of the layer input and are built on the
autodiff tape, so gradients reach ``w`` and, unless disabled, the input.
"""

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import BinaryIO, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from ..autodiff import ArrayLike, Node, as_node
from ..errors import (
    ConfigurationError,
    DegenerateWeights,
    ImpossibleBalance,
    NonFiniteError,
    UninitializedStats,
    ZeroInputSum,
)
from ..tensor import ConvSpec, read_bnt1, write_bnt1
from .base import Mode

EPS_INPUT = 1e-12
EPS_DENOM = 1e-12


class NormVariant(str, Enum):
    TWO_PASS = "two_pass"
    SINGLE_PASS = "single_pass"


VARIANT_TAGS = {NormVariant.TWO_PASS: 0, NormVariant.SINGLE_PASS: 1}


@dataclass(frozen=True)
class NormGeometry:
    batchsize: int
    heightout: int
    widthout: int
    stride: int
    kernelheight: int
    kernelwidth: int
    heightin: int
    widthin: int

    @property
    def r(self) -> float:
        """Target total positive contribution."""
        return float(self.batchsize * self.heightout * self.widthout * self.stride**2)

    @property
    def input_elements(self) -> int:
        """Elements per input channel, B*H*W."""
        return self.batchsize * self.heightin * self.widthin

    @classmethod
    def for_conv(cls, x_shape: Sequence[int], w_shape: Sequence[int], spec: ConvSpec) -> "NormGeometry":
        batch, _, h, w = x_shape
        _, _, kh, kw = w_shape
        hout, wout = spec.output_size(h, w, kh, kw)
        return cls(batch, hout, wout, spec.stride, kh, kw, h, w)


@dataclass
class ChannelStats:
    """Per-input-channel statistics: the live batch sums and their running per-element mean."""

    v: Optional[np.ndarray]
    v_bar_running: np.ndarray
    momentum: float = 0.1
    initialized: bool = False

    @classmethod
    def create(cls, channels_in: int, momentum: float = 0.1) -> "ChannelStats":
        if not 0.0 < momentum < 1.0:
            raise ConfigurationError(f"running-stat momentum must lie in (0, 1), got {momentum}")
        return cls(v=None, v_bar_running=np.zeros(channels_in), momentum=momentum)


@dataclass
class BalNormState:
    b: np.ndarray
    s: np.ndarray
    variant: NormVariant
    stat_fraction: float
    stats: ChannelStats
    post_affine_gain: np.ndarray
    post_affine_bias: np.ndarray
    stop_grad_v: bool = False

    @classmethod
    def create(
        cls,
        channels_out: int,
        channels_in: int,
        variant: Union[NormVariant, str] = NormVariant.SINGLE_PASS,
        stat_fraction: float = 1.0,
        momentum: float = 0.1,
        stop_grad_v: bool = False,
    ) -> "BalNormState":
        if not 0.0 < stat_fraction <= 1.0:
            raise ConfigurationError(f"stat_fraction must lie in (0, 1], got {stat_fraction}")
        return cls(
            b=np.zeros(channels_out),
            s=np.ones(channels_out),
            variant=NormVariant(variant),
            stat_fraction=stat_fraction,
            stats=ChannelStats.create(channels_in, momentum),
            post_affine_gain=np.ones(channels_out),
            post_affine_bias=np.zeros(channels_out),
            stop_grad_v=stop_grad_v,
        )


def statistics_batch(batchsize: int, stat_fraction: float) -> int:
    """Number of leading instances used for the channel sums."""
    if not 0.0 < stat_fraction <= 1.0:
        raise ConfigurationError(f"stat_fraction must lie in (0, 1], got {stat_fraction}")
    return max(1, min(batchsize, math.ceil(stat_fraction * batchsize)))


def compute_channel_sums(x: Union[Node, ArrayLike], stat_fraction: float = 1.0) -> Node:
    """Per-input-channel sums of ``x``, estimated from the leading instances.

    Only the first ``ceil(stat_fraction * B)`` instances are summed; the result is
    rescaled by ``B / count`` so it estimates the full-batch sum.
    """
    x = as_node(x)
    batchsize = x.shape[0]
    count = statistics_batch(batchsize, stat_fraction)
    head = x if count == batchsize else x.batch_head(count)
    sums = head.sum(axis=(0, 2, 3))
    if count == batchsize:
        return sums
    return sums * (batchsize / count)


def compute_bias(w: Union[Node, ArrayLike], v: Union[Node, ArrayLike]) -> Node:
    """b[d] = -sum_c v[c] w[d,c] / ((kh*kw) sum_c v[c]), with w[d,c] the kernel-slice sum."""
    w, v = as_node(w), as_node(v)
    total = float(v.value.sum())
    if total <= EPS_INPUT:
        raise ZeroInputSum(f"input channel sums add up to {total:.3e}; the layer input is dead or non-positive")
    kernel_size = w.shape[2] * w.shape[3]
    slice_sums = w.sum(axis=(2, 3))
    return -(slice_sums * v).sum(axis=1) / (v.sum() * float(kernel_size))


def mixed_sign_channels(w: ArrayLike) -> np.ndarray:
    """Per output channel, whether the raw kernel slice holds both signs."""
    w = np.asarray(w)
    return (w > 0).any(axis=(1, 2, 3)) & (w < 0).any(axis=(1, 2, 3))


def _checked_scale(denominator: Node, geom: NormGeometry, w: Node, v: Node) -> Node:
    """r / denominator, refusing single-signed channels and denominators that are not clearly positive.

    The sign test looks at the unshifted weights. The threshold is EPS_DENOM
    relative to sum_c v[c] sum_jk |w[d,c]| once that exceeds one, so
    cancellation noise cannot pass as a valid scale.
    """
    values = denominator.value
    magnitude = np.abs(w.value).sum(axis=(2, 3)) @ np.abs(v.value)
    limits = EPS_DENOM * np.maximum(1.0, magnitude)
    mixed = mixed_sign_channels(w.value)
    if not np.isfinite(values).all():
        raise NonFiniteError(f"balance denominator is not finite: {values}")
    for channel, (value, limit) in enumerate(zip(values, limits)):
        if not mixed[channel] or value <= limit:
            raise DegenerateWeights(channel, float(value))
    return geom.r / denominator


def compute_scale_two_pass(
    w: Union[Node, ArrayLike], b: Union[Node, ArrayLike], v: Union[Node, ArrayLike], geom: NormGeometry
) -> Node:
    """s[d] = r / sum_c v[c] w'+[d,c], where w'+ sums the positive shifted weights.

    The sign indicator is held constant on the tape.
    """
    w, b, v = as_node(w), as_node(b), as_node(v)
    shifted = w + b.reshape(-1, 1, 1, 1)
    positive = (shifted * (shifted.value > 0)).sum(axis=(2, 3))
    return _checked_scale((positive * v).sum(axis=1), geom, w, v)


def compute_scale_single_pass(
    w: Union[Node, ArrayLike], b: Union[Node, ArrayLike], v: Union[Node, ArrayLike], geom: NormGeometry
) -> Node:
    """Scale assuming no weight changes sign under the shift.

    s[d] = r / sum_c v[c] (w+[d,c] + b[d] n+[d,c]) with w+ the sum and n+ the
    count of the positive original weights.
    """
    w, b, v = as_node(w), as_node(b), as_node(v)
    mask = w.value > 0
    positive = (w * mask).sum(axis=(2, 3))
    counts = mask.sum(axis=(2, 3)).astype(np.float64)
    shifted_positive = positive + b.reshape(-1, 1) * counts
    return _checked_scale((shifted_positive * v).sum(axis=1), geom, w, v)


SCALE_FUNCTIONS = {
    NormVariant.TWO_PASS: compute_scale_two_pass,
    NormVariant.SINGLE_PASS: compute_scale_single_pass,
}


def update_running_stats(stats: ChannelStats, v: ArrayLike, geom: NormGeometry) -> ChannelStats:
    """Fold the batch sums into the running per-element mean."""
    v = np.asarray(v, dtype=np.float64)
    per_element = v / geom.input_elements
    if not stats.initialized:
        running = per_element.copy()
    else:
        running = (1.0 - stats.momentum) * stats.v_bar_running + stats.momentum * per_element
    if not np.isfinite(running).all():
        raise NonFiniteError(f"running channel statistic became non-finite: {running}")
    return replace(stats, v=v.copy(), v_bar_running=running, initialized=True)


def balnorm_transform(
    w: Union[Node, ArrayLike],
    x: Union[Node, ArrayLike],
    state: BalNormState,
    geom: NormGeometry,
    mode: Union[Mode, str] = Mode.TRAIN,
    update_stats: bool = True,
    channel_sums: Optional[ArrayLike] = None,
) -> Node:
    """Return the normalized kernel ``w''`` for the batch ``x``.

    Train mode sums the live batch (or uses ``channel_sums`` when given, as a
    constant) and, when ``update_stats`` is set, folds the sums into the running
    statistic. Eval mode rebuilds ``v`` from the running per-element mean for the
    eval batch geometry.
    """
    w, x = as_node(w), as_node(x)
    mode = Mode(mode)
    if mode is Mode.TRAIN:
        if channel_sums is not None:
            v = Node(np.asarray(channel_sums, dtype=np.float64))
        else:
            v = compute_channel_sums(x, state.stat_fraction)
            if state.stop_grad_v:
                v = v.detach()
        if update_stats:
            state.stats = update_running_stats(state.stats, v.value, geom)
        else:
            state.stats = replace(state.stats, v=v.value.copy())
    else:
        if not state.stats.initialized:
            raise UninitializedStats("eval-mode balanced normalization before any training step")
        v = Node(state.stats.v_bar_running * geom.input_elements)

    b = compute_bias(w, v)
    s = SCALE_FUNCTIONS[state.variant](w, b, v, geom)
    state.b = b.value.copy()
    state.s = s.value.copy()
    logger.trace(f"balnorm {state.variant.value}: s in [{s.value.min():.4g}, {s.value.max():.4g}]")
    return s.reshape(-1, 1, 1, 1) * (w + b.reshape(-1, 1, 1, 1))


def rebalance_signs(w: ArrayLike, rng: np.random.Generator) -> np.ndarray:
    """Resample signs of any output-channel slice that is not mixed-sign.

    Each element of an offending slice independently gets sign +/- with
    probability one half until the slice holds both signs; magnitudes are kept.
    """
    w = np.array(w, dtype=np.float64)
    for d in range(w.shape[0]):
        magnitudes = np.abs(w[d])
        if np.count_nonzero(magnitudes) < 2:
            raise ImpossibleBalance(f"output channel {d} has fewer than two non-zero weights")
        values = w[d]
        while not ((values > 0).any() and (values < 0).any()):
            values = magnitudes * rng.choice([-1.0, 1.0], size=magnitudes.shape)
        w[d] = values
    return w


def balanced_init(shape: Tuple[int, int, int, int], rng_seed: int) -> np.ndarray:
    """He fan-out normal kernel in which every output channel has mixed signs."""
    channels_out, channels_in, kh, kw = shape
    if channels_in * kh * kw < 2:
        raise ImpossibleBalance(f"kernel {shape} has a single weight per output channel")
    rng = np.random.default_rng(rng_seed)
    std = math.sqrt(2.0 / (channels_out * kh * kw))
    return rebalance_signs(rng.normal(0.0, std, size=shape), rng)


def positive_contribution(w2: ArrayLike, v: ArrayLike) -> np.ndarray:
    """Total contribution of the positive entries of ``w2`` per output channel, sum_c v[c] w2+[d,c]."""
    w2 = np.asarray(w2, dtype=np.float64)
    positive = np.where(w2 > 0, w2, 0.0).sum(axis=(2, 3))
    return positive @ np.asarray(v, dtype=np.float64)


def dump_balnorm_state(stream: BinaryIO, w: ArrayLike, state: BalNormState) -> None:
    """Write the variant tag, the initialized flag and the (w, b, s, v_bar, gain, bias) records."""
    stream.write(bytes([VARIANT_TAGS[state.variant], int(state.stats.initialized)]))
    for record in (w, state.b, state.s, state.stats.v_bar_running, state.post_affine_gain, state.post_affine_bias):
        write_bnt1(stream, record)


def load_balnorm_state(
    stream: BinaryIO, stat_fraction: float = 1.0, momentum: float = 0.1, stop_grad_v: bool = False
) -> Tuple[np.ndarray, BalNormState]:
    header = stream.read(2)
    if len(header) != 2:
        raise ConfigurationError("balanced-normalization state ended before its header")
    tags = {tag: variant for variant, tag in VARIANT_TAGS.items()}
    if header[0] not in tags:
        raise ConfigurationError(f"unknown variant tag {header[0]}")
    w, b, s, v_bar, gain, bias = (read_bnt1(stream) for _ in range(6))
    state = BalNormState(
        b=b,
        s=s,
        variant=tags[header[0]],
        stat_fraction=stat_fraction,
        stats=ChannelStats(v=None, v_bar_running=v_bar, momentum=momentum, initialized=bool(header[1])),
        post_affine_gain=gain,
        post_affine_bias=bias,
        stop_grad_v=stop_grad_v,
    )
    return w, state
