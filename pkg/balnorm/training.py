"""The training loop behind ``balnorm train``."""

import time
from typing import List, Tuple

import numpy as np
from loguru import logger

from .autodiff import backward
from .config import TrainConfig
from .data import AugmentSpec, Dataset, augment, iterate_batches, load_dataset, one_hot
from .metrics import MetricsRecord, write_metrics_csv
from .model import Network, NormKind, build_tinynet, cross_entropy_loss, save_checkpoint
from .norms import Mode
from .optim import (
    DecayScope,
    MixupConfig,
    SGDState,
    describe,
    log_schedule,
    lr_at,
    mixup_batch,
    parse_schedule,
    sgd_step,
)


def evaluate(net: Network, dataset: Dataset, batch_size: int) -> Tuple[float, float]:
    """Mean loss and accuracy over ``dataset`` in eval mode, without augmentation."""
    total_loss, correct = 0.0, 0
    for images, labels in iterate_batches(dataset, batch_size, shuffle=False):
        logits = net.forward(images, Mode.EVAL)
        total_loss += float(cross_entropy_loss(logits, labels).value) * len(labels)
        correct += int((logits.value.argmax(axis=1) == labels).sum())
    return total_loss / len(dataset), correct / len(dataset)


def train_epoch(
    net: Network,
    dataset: Dataset,
    config: TrainConfig,
    sgd: SGDState,
    augment_spec: AugmentSpec,
    mixup: MixupConfig,
    rngs: Tuple[np.random.Generator, np.random.Generator, np.random.Generator],
) -> Tuple[float, float]:
    shuffle_rng, augment_rng, mixup_rng = rngs
    total_loss, correct = 0.0, 0
    for step, (images, labels) in enumerate(iterate_batches(dataset, config.batch_size, shuffle_rng)):
        images = augment(images, augment_spec, augment_rng)
        targets = one_hot(labels, dataset.num_classes)
        images, targets, _ = mixup_batch(images, targets, mixup, mixup_rng)

        params = net.parameter_nodes()
        logits = net.forward(images, Mode.TRAIN, params)
        loss = cross_entropy_loss(logits, targets)
        grads = backward(loss, params.values())
        net.params, _ = sgd_step(net.params, {name: grads[node] for name, node in params.items()}, sgd)

        total_loss += float(loss.value) * len(labels)
        correct += int((logits.value.argmax(axis=1) == labels).sum())
        logger.debug(f"step {step}: loss {float(loss.value):.6f}")
    return total_loss / len(dataset), correct / len(dataset)


def train(config: TrainConfig) -> List[MetricsRecord]:
    """Train TinyNet as configured; write the metrics CSV and checkpoint when requested.

    All randomness derives from ``config.seed``: parameter initialization, batch
    order, augmentation and mixup each draw from their own stream.
    """
    train_set, test_set = load_dataset(
        config.dataset, config.subset, config.num_classes, config.image_size, config.seed
    )
    init_seed, shuffle_seed, augment_seed, mixup_seed = np.random.SeedSequence(config.seed).generate_state(4)
    net = build_tinynet(
        NormKind.from_flag(config.norm),
        num_classes=train_set.num_classes,
        seed=int(init_seed),
        in_channels=train_set.image_shape[0],
        padding_mode=config.padding,
        stat_fraction=config.stat_fraction,
        stop_grad_v=config.stop_grad_v,
    )
    schedule = parse_schedule(config.schedule, config.epochs, config.lr, config.momentum)
    sgd = SGDState(config.lr, config.momentum, config.weight_decay, DecayScope(config.decay_scope))
    augment_spec = AugmentSpec.for_dataset(config.dataset, train_set.image_shape[1])
    mixup = MixupConfig.from_alpha(config.mixup_alpha)
    rngs = tuple(np.random.default_rng(int(s)) for s in (shuffle_seed, augment_seed, mixup_seed))

    logger.info(
        f"Training {config.norm} TinyNet for {config.epochs} epochs "
        f"(batch {config.batch_size}, {describe(schedule)}, seed {config.seed})"
    )
    log_schedule(schedule, range(1, config.epochs + 1))
    started = time.perf_counter()
    records: List[MetricsRecord] = []
    for epoch in range(1, config.epochs + 1):
        sgd.lr, sgd.momentum = lr_at(schedule, epoch)
        train_loss, train_acc = train_epoch(net, train_set, config, sgd, augment_spec, mixup, rngs)
        test_loss, test_acc = evaluate(net, test_set, config.batch_size)
        wall = time.perf_counter() - started if config.wall_clock else 0.0
        records.append(MetricsRecord(epoch, train_loss, train_acc, test_loss, test_acc, sgd.lr, wall))
        logger.info(
            f"epoch {epoch}/{config.epochs}: train loss {train_loss:.4f} acc {train_acc:.3f} | "
            f"test loss {test_loss:.4f} acc {test_acc:.3f} | lr {sgd.lr:.4g}"
        )

    if config.out:
        write_metrics_csv(records, config.out)
    if config.checkpoint:
        save_checkpoint(net, config.checkpoint)
    return records
