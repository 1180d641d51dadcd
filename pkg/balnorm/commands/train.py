"""``balnorm train``: train TinyNet and write per-epoch metrics and a checkpoint."""

import argparse
from dataclasses import fields

from loguru import logger

from ..config import NORM_CHOICES, PADDING_CHOICES, TrainConfig, build_train_config

DEFAULTS = TrainConfig()

# (flag, type, choices, help); defaults come from TrainConfig so YAML files can fill unset flags
FLAGS = [
    ("--norm", str, NORM_CHOICES, "normalization in every conv layer"),
    ("--dataset", str, None, "synth, cifar10:<dir> or bnt1:<dir>"),
    ("--subset", int, None, "train instances to keep (test keeps subset/5); CIFAR-10 default 5000"),
    ("--epochs", int, None, "number of epochs"),
    ("--batch-size", int, None, "mini-batch size"),
    ("--lr", float, None, "base learning rate"),
    ("--momentum", float, None, "SGD momentum (one-cycle overrides it per epoch)"),
    ("--weight-decay", float, None, "L2 weight decay"),
    ("--decay-scope", str, ("all", "weights"), "parameters that receive weight decay"),
    ("--schedule", str, None, "step:<e1,e2,...> or onecycle"),
    ("--stat-fraction", float, None, "leading fraction of each batch used for channel sums"),
    ("--mixup-alpha", float, None, "Beta(alpha, alpha) input mixup; 0 disables"),
    ("--seed", int, None, "seed for initialization, shuffling, augmentation and mixup"),
    ("--out", str, None, "metrics CSV path"),
    ("--checkpoint", str, None, "checkpoint path (a .manifest file is written next to it)"),
    ("--padding", str, PADDING_CHOICES, "convolution padding mode"),
    ("--num-classes", int, None, "classes for synthetic data"),
    ("--image-size", int, None, "side length of synthetic images"),
]
SWITCHES = [
    ("--stop-grad-v", "treat channel sums as constants in the backward pass"),
    ("--wall-clock", "record elapsed seconds in the metrics CSV (breaks byte-identical reruns)"),
]


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="train a network and write metrics", description=__doc__)
    parser.add_argument("--config", default=None, help="YAML file with default values for any flag (default: none)")
    for flag, kind, choices, text in FLAGS:
        default = getattr(DEFAULTS, flag[2:].replace("-", "_"))
        parser.add_argument(flag, type=kind, choices=choices, default=None, help=f"{text} (default: {default})")
    for flag, text in SWITCHES:
        parser.add_argument(flag, action="store_true", default=None, help=f"{text} (default: off)")
    parser.set_defaults(run=run)


def run(args: argparse.Namespace) -> int:
    from ..training import train

    known = {f.name for f in fields(TrainConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in known}
    config = build_train_config(overrides, args.config)
    records = train(config)
    final = records[-1]
    logger.info(
        f"Finished {config.epochs} epochs: train loss {final.train_loss:.4f}, test acc {final.test_acc:.3f}"
    )
    return 0
