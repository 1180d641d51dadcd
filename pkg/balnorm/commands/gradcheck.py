"""``balnorm gradcheck``: compare reverse-mode gradients with finite differences."""

import argparse
from typing import Dict, Optional

import numpy as np
from loguru import logger
from rich.console import Console
from rich.table import Table

from ..autodiff import GradCheckReport, conv2d, grad_check
from ..config import NORM_CHOICES, PADDING_CHOICES
from ..model import Network, build_network, build_tinynet, cross_entropy_loss, gradcheck_specs
from ..norms import BalNormState, Mode, NormGeometry, NormVariant, balanced_init, balnorm_transform
from ..norms.balanced import compute_channel_sums
from ..tensor import ConvSpec


def isolated_layer_check(
    variant: NormVariant,
    seed: int = 0,
    h: float = 1e-6,
    tolerance: float = 1e-5,
    stop_grad_v: bool = False,
    padding: str = "cyclic",
) -> GradCheckReport:
    """Check d/dw and d/dx of a random projection of one balanced conv layer's output.

    With ``stop_grad_v`` the channel sums are frozen at their initial value, so the
    finite differences see the same function the tape differentiates.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 1.0, size=(2, 3, 6, 6))
    w = balanced_init((4, 3, 3, 3), seed)
    spec = ConvSpec(1, padding)
    projection = rng.normal(size=(2, 4, 6, 6))
    frozen = compute_channel_sums(x).value if stop_grad_v else None
    geom = NormGeometry.for_conv(x.shape, w.shape, spec)

    def objective(p):
        state = BalNormState.create(4, 3, variant, stop_grad_v=stop_grad_v)
        w2 = balnorm_transform(p["w"], p["x"], state, geom, Mode.TRAIN, update_stats=False, channel_sums=frozen)
        return (conv2d(p["x"], w2, spec) * projection).sum()

    return grad_check(objective, {"w": w, "x": x}, h=h, tolerance=tolerance, seed=seed)


def network_check(
    net: Network, x: np.ndarray, labels: np.ndarray, seed: int = 0, h: float = 1e-6, tolerance: float = 1e-5
) -> GradCheckReport:
    """Check the cross-entropy gradient of every parameter of ``net`` in train mode."""
    frozen: Optional[Dict[str, np.ndarray]] = None
    if net.stop_grad_v:
        net.forward(x, Mode.TRAIN, update_stats=False)
        frozen = {name: net.states[name].stats.v.copy() for name in net.balanced_layers()}

    def objective(p):
        logits = net.forward(x, Mode.TRAIN, p, update_stats=False, frozen_sums=frozen)
        return cross_entropy_loss(logits, labels)

    return grad_check(objective, net.params, h=h, tolerance=tolerance, seed=seed)


def network_inputs(seed: int, channels: int, side: int, batch: int, classes: int):
    rng = np.random.default_rng(seed + 1)
    return rng.uniform(0.0, 1.0, size=(batch, channels, side, side)), rng.integers(0, classes, size=batch)


def run_all(norm: str, seed: int, h: float, tolerance: float, stop_grad_v: bool, padding: str
            ) -> Dict[str, GradCheckReport]:
    reports: Dict[str, GradCheckReport] = {}
    for variant in (NormVariant.TWO_PASS, NormVariant.SINGLE_PASS):
        reports[f"layer/{variant.value}"] = isolated_layer_check(variant, seed, h, tolerance, stop_grad_v, padding)

    small = build_network(gradcheck_specs(norm, 3, padding), seed=seed, stop_grad_v=stop_grad_v)
    x, labels = network_inputs(seed, 3, 8, 2, 3)
    reports["net/2-conv"] = network_check(small, x, labels, seed, h, tolerance)

    tiny = build_tinynet(norm, num_classes=4, seed=seed, padding_mode=padding, stop_grad_v=stop_grad_v)
    x, labels = network_inputs(seed, 3, 8, 2, 4)
    reports["net/tinynet"] = network_check(tiny, x, labels, seed, h, tolerance)
    return reports


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "gradcheck",
        help="check gradients against finite differences",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--norm", choices=NORM_CHOICES, default="balnorm", help="normalization in the networks")
    parser.add_argument("--seed", type=int, default=0, help="seed for weights, inputs and coordinate sampling")
    parser.add_argument("--h", type=float, default=1e-6, help="finite-difference step")
    parser.add_argument("--tolerance", type=float, default=1e-5, help="maximum relative error")
    parser.add_argument("--padding", choices=PADDING_CHOICES, default="cyclic", help="convolution padding mode")
    parser.add_argument("--stop-grad-v", action="store_true", help="cut the gradient path through channel sums")
    parser.set_defaults(run=run)


def run(args: argparse.Namespace) -> int:
    reports = run_all(args.norm, args.seed, args.h, args.tolerance, args.stop_grad_v, args.padding)

    table = Table(title=f"Gradient check (h={args.h:g}, tolerance={args.tolerance:g})")
    for column in ("target", "parameter", "max rel error", "kinks", "unresolved", "result"):
        table.add_column(column)
    for target, report in reports.items():
        for name, error in report.max_rel_error.items():
            ok = error <= report.tolerance
            table.add_row(
                target,
                name,
                f"{error:.3e}",
                str(len(report.excluded.get(name, []))),
                str(report.unresolved.get(name, 0)),
                "[green]pass[/]" if ok else "[bold red]fail[/]",
            )
    Console().print(table)

    failed = {target: report for target, report in reports.items() if not report.passed}
    if failed:
        target, report = max(failed.items(), key=lambda item: item[1].overall_error)
        name, index, g_ad, g_fd, err = report.worst
        logger.error(f"Gradient check failed in {target}: {name}{list(index)} autodiff {g_ad:.10g} vs fd {g_fd:.10g} (rel {err:.3e})")
        return 1
    return 0
