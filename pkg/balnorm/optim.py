"""SGD with classical momentum, learning-rate schedules and input mixup."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from loguru import logger

from .errors import ConfigurationError, EpochOutOfRangeError, NonFiniteError, ShapeMismatchError


class DecayScope(str, Enum):
    ALL = "all"
    WEIGHTS = "weights"


@dataclass
class SGDState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_scope: DecayScope = DecayScope.ALL
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def decays(self, name: str) -> bool:
        if self.weight_decay == 0.0:
            return False
        return self.decay_scope is DecayScope.ALL or name.endswith(".weight")


def sgd_step(
    params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: SGDState
) -> Tuple[Dict[str, np.ndarray], SGDState]:
    """One momentum step: ``v <- mu*v + (g + wd*p)``, ``p <- p - lr*v``.

    Returns new parameter arrays; the velocity buffers in ``state`` are replaced.
    Parameters without a gradient are passed through untouched.
    """
    updated: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient of {name}", p.shape, g.shape)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}", layer=name.split(".")[0])
        step = g + state.weight_decay * p if state.decays(name) else g
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeMismatchError(f"velocity of {name}", p.shape, v.shape)
        v = state.momentum * v + step
        state.velocity[name] = v
        updated[name] = p - state.lr * v
    return updated, state


class ScheduleKind(str, Enum):
    STEP_DECAY = "step_decay"
    ONE_CYCLE = "one_cycle"


@dataclass(frozen=True)
class Schedule:
    """Per-epoch learning rate and momentum; epochs are 1-based."""

    kind: ScheduleKind
    total_epochs: int
    base_lr: float = 0.1
    base_momentum: float = 0.9
    milestones: Tuple[int, ...] = (150, 225)
    factor: float = 0.1
    peak_factor: float = 5.0
    peak_epoch: int = 13
    ramp_down_epoch: int = 26
    anneal_factor: float = 100.0
    anneal_epoch: int = 30
    momentum_high: float = 0.95
    momentum_low: float = 0.85

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigurationError(f"a schedule needs at least one epoch, got {self.total_epochs}")
        if self.base_lr <= 0:
            raise ConfigurationError(f"base learning rate must be positive, got {self.base_lr}")
        if self.kind is ScheduleKind.STEP_DECAY and not 0 < self.factor:
            raise ConfigurationError(f"step factor must be positive, got {self.factor}")
        if self.kind is ScheduleKind.ONE_CYCLE and not 1 < self.peak_epoch < self.ramp_down_epoch < self.anneal_epoch:
            raise ConfigurationError("one-cycle waypoints must satisfy 1 < peak < ramp-down < anneal end")


def parse_schedule(text: str, total_epochs: int, base_lr: float = 0.1, base_momentum: float = 0.9) -> Schedule:
    """Parse ``step:<e1,e2,...>`` or ``onecycle``."""
    if text == "onecycle":
        return Schedule(ScheduleKind.ONE_CYCLE, total_epochs, base_lr=base_lr, base_momentum=base_momentum)
    if text.startswith("step:"):
        body = text[len("step:"):]
        try:
            milestones = tuple(sorted(int(e) for e in body.split(",") if e.strip()))
        except ValueError as e:
            raise ConfigurationError(f"bad milestone list in schedule {text!r}") from e
        if any(m < 1 for m in milestones):
            raise ConfigurationError(f"milestones must be positive epochs, got {milestones}")
        return Schedule(
            ScheduleKind.STEP_DECAY, total_epochs, base_lr=base_lr, base_momentum=base_momentum, milestones=milestones
        )
    raise ConfigurationError(f"unknown schedule {text!r}; expected step:<e1,e2> or onecycle")


def _interpolate(start: float, end: float, e0: int, e1: int, epoch: int) -> float:
    t = (epoch - e0) / (e1 - e0)
    return start * (1.0 - t) + end * t


def lr_at(schedule: Schedule, epoch: int) -> Tuple[float, float]:
    """Learning rate and momentum for ``epoch``.

    Step decay multiplies the base rate by ``factor`` once per milestone already
    reached. One-cycle ramps linearly from base to ``peak_factor * base`` at
    ``peak_epoch``, back to base at ``ramp_down_epoch``, then decays geometrically
    by ``anneal_factor`` at ``anneal_epoch``; momentum mirrors the ramps and stays
    at the low value once the ramp-down ends.
    """
    if not 1 <= epoch <= schedule.total_epochs:
        raise EpochOutOfRangeError(f"epoch {epoch} outside the run 1..{schedule.total_epochs}")

    if schedule.kind is ScheduleKind.STEP_DECAY:
        reached = sum(1 for m in schedule.milestones if m <= epoch)
        return schedule.base_lr / (1.0 / schedule.factor) ** reached, schedule.base_momentum

    base, peak = schedule.base_lr, schedule.base_lr * schedule.peak_factor
    hi, lo = schedule.momentum_high, schedule.momentum_low
    if epoch <= schedule.peak_epoch:
        return (
            _interpolate(base, peak, 1, schedule.peak_epoch, epoch),
            _interpolate(hi, lo, 1, schedule.peak_epoch, epoch),
        )
    if epoch <= schedule.ramp_down_epoch:
        return (
            _interpolate(peak, base, schedule.peak_epoch, schedule.ramp_down_epoch, epoch),
            _interpolate(lo, hi, schedule.peak_epoch, schedule.ramp_down_epoch, epoch),
        )
    span = schedule.anneal_epoch - schedule.ramp_down_epoch
    progress = min(epoch - schedule.ramp_down_epoch, span) / span
    return base / schedule.anneal_factor**progress, lo


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.0
    enabled: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"mixup alpha must be non-negative, got {self.alpha}")
        if self.enabled and self.alpha == 0:
            raise ConfigurationError("mixup is enabled but alpha is 0")

    @classmethod
    def from_alpha(cls, alpha: float) -> "MixupConfig":
        return cls(alpha=alpha, enabled=alpha > 0)


def partner_permutation(batchsize: int, rng: np.random.Generator) -> np.ndarray:
    """A seeded shuffle arranged as one cycle, so no instance is paired with itself when B > 1."""
    order = rng.permutation(batchsize)
    perm = np.empty(batchsize, dtype=np.int64)
    perm[order] = np.roll(order, 1)
    return perm


def mixup_batch(
    x: np.ndarray,
    targets: np.ndarray,
    cfg: MixupConfig,
    rng: np.random.Generator,
    lam: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Blend each instance with a shuffled partner: ``lam*x + (1-lam)*x[perm]``.

    ``lam`` is drawn from Beta(alpha, alpha) once per batch unless given. A
    disabled config returns the batch unchanged with ``lam = 1``.
    """
    if not cfg.enabled:
        return x, targets, 1.0
    if lam is None:
        lam = float(rng.beta(cfg.alpha, cfg.alpha))
    perm = partner_permutation(x.shape[0], rng)
    mixed_x = lam * x + (1.0 - lam) * x[perm]
    mixed_t = lam * targets + (1.0 - lam) * targets[perm]
    return mixed_x, mixed_t, lam


def log_schedule(schedule: Schedule, epochs: Iterable[int]) -> None:
    for epoch in epochs:
        lr, momentum = lr_at(schedule, epoch)
        logger.debug(f"schedule epoch {epoch}: lr={lr:.6g} momentum={momentum:.4g}")


def describe(schedule: Schedule) -> str:
    if schedule.kind is ScheduleKind.STEP_DECAY:
        return f"step decay x{schedule.factor:g} at {list(schedule.milestones)}"
    return (
        f"one-cycle {schedule.base_lr:g}->{schedule.base_lr * schedule.peak_factor:g} "
        f"(epochs 1-{schedule.peak_epoch}-{schedule.ramp_down_epoch}), anneal /{schedule.anneal_factor:g} "
        f"by {schedule.anneal_epoch}"
    )
