"""Small convolutional networks with a pluggable normalization per conv layer."""

import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from loguru import logger

from . import config
from .autodiff import ArrayLike, Node, as_node, conv2d, matmul
from .data import one_hot
from .errors import BalNormError, ConfigurationError, FormatError, NonFiniteError, ShapeMismatchError
from .norms import BalNormState, BatchNormState, Mode, NormGeometry, NormVariant, balanced_init, balnorm_transform
from .norms import batchnorm_forward, identity_forward
from .norms.balanced import dump_balnorm_state, load_balnorm_state
from .norms.batchnorm import dump_batchnorm_state, load_batchnorm_state
from .tensor import ConvSpec, PaddingMode, read_bnt1, write_bnt1


class LayerKind(str, Enum):
    CONV = "conv"
    RELU = "relu"
    GLOBAL_AVG_POOL = "global_avg_pool"
    LINEAR = "linear"


class NormKind(str, Enum):
    BALNORM_SINGLE = "balnorm_single"
    BALNORM_TWO = "balnorm_two"
    BATCHNORM = "batchnorm"
    NONE = "none"

    @property
    def is_balanced(self) -> bool:
        return self in (NormKind.BALNORM_SINGLE, NormKind.BALNORM_TWO)

    @classmethod
    def from_flag(cls, flag: str) -> "NormKind":
        """Map a ``--norm`` value onto a NormKind."""
        flags = {
            "balnorm": cls.BALNORM_SINGLE,
            "balnorm-two-pass": cls.BALNORM_TWO,
            "batchnorm": cls.BATCHNORM,
            "none": cls.NONE,
        }
        if flag in flags:
            return flags[flag]
        return cls(flag)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding_mode: PaddingMode = PaddingMode.CYCLIC
    norm: NormKind = NormKind.NONE

    @classmethod
    def conv(cls, cin: int, cout: int, kernel: int = 3, stride: int = 1,
             padding_mode: Union[PaddingMode, str] = PaddingMode.CYCLIC,
             norm: Union[NormKind, str] = NormKind.NONE) -> "LayerSpec":
        return cls(LayerKind.CONV, cin, cout, kernel, stride, PaddingMode(padding_mode), NormKind(norm))

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(LayerKind.RELU)

    @classmethod
    def pool(cls) -> "LayerSpec":
        return cls(LayerKind.GLOBAL_AVG_POOL)

    @classmethod
    def linear(cls, features_in: int, features_out: int) -> "LayerSpec":
        return cls(LayerKind.LINEAR, features_in, features_out)

    @property
    def conv_spec(self) -> ConvSpec:
        return ConvSpec(stride=self.stride, padding_mode=self.padding_mode)

    def to_manifest(self) -> Dict[str, str]:
        return {k: (v.value if isinstance(v, Enum) else str(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_manifest(cls, fields: Mapping[str, str]) -> "LayerSpec":
        return cls(
            kind=LayerKind(fields["kind"]),
            in_channels=int(fields["in_channels"]),
            out_channels=int(fields["out_channels"]),
            kernel=int(fields["kernel"]),
            stride=int(fields["stride"]),
            padding_mode=PaddingMode(fields["padding_mode"]),
            norm=NormKind(fields["norm"]),
        )


def validate_layers(specs: Sequence[LayerSpec]) -> None:
    """Check that consecutive layers compose and BalNorm convs after the first follow a ReLU."""
    if not specs:
        raise ConfigurationError("a network needs at least one layer")
    channels: Optional[int] = None
    flat = False
    seen_conv = False
    for i, spec in enumerate(specs):
        where = f"layer {i} ({spec.kind.value})"
        if spec.kind is LayerKind.CONV:
            if flat:
                raise ConfigurationError(f"{where}: convolution after pooling")
            if channels is not None and spec.in_channels != channels:
                raise ShapeMismatchError(f"{where} input channels", channels, spec.in_channels)
            if spec.norm.is_balanced and seen_conv and (i == 0 or specs[i - 1].kind is not LayerKind.RELU):
                raise ConfigurationError(f"{where}: balanced normalization needs a preceding ReLU")
            channels = spec.out_channels
            seen_conv = True
        elif spec.kind is LayerKind.GLOBAL_AVG_POOL:
            if flat:
                raise ConfigurationError(f"{where}: input is already pooled")
            flat = True
        elif spec.kind is LayerKind.LINEAR:
            if not flat:
                raise ConfigurationError(f"{where}: linear head needs pooled input")
            if channels is not None and spec.in_channels != channels:
                raise ShapeMismatchError(f"{where} input features", channels, spec.in_channels)
            channels = spec.out_channels


class Network:
    """Ordered layers, their parameters and per-layer normalization states.

    Parameters are named ``"<layer>.<param>"`` with layer names ``conv0``,
    ``relu1`` ... taken from the layer kind and its index.
    """

    def __init__(
        self,
        specs: Sequence[LayerSpec],
        params: Dict[str, np.ndarray],
        states: Dict[str, Union[BalNormState, BatchNormState]],
        stat_fraction: float = 1.0,
        momentum: float = 0.1,
        stop_grad_v: bool = False,
    ):
        validate_layers(specs)
        self.specs = list(specs)
        self.params = params
        self.states = states
        self.stat_fraction = stat_fraction
        self.momentum = momentum
        self.stop_grad_v = stop_grad_v

    @property
    def layer_names(self) -> List[str]:
        return [f"{spec.kind.value}{i}" for i, spec in enumerate(self.specs)]

    @property
    def num_outputs(self) -> int:
        for spec in reversed(self.specs):
            if spec.kind in (LayerKind.CONV, LayerKind.LINEAR):
                return spec.out_channels
        raise ConfigurationError("network has no layer that fixes its output width")

    def parameter_nodes(self) -> Dict[str, Node]:
        """Fresh leaf nodes for every parameter, for one forward/backward pass."""
        return {name: Node.leaf(value, name=name) for name, value in self.params.items()}

    def balanced_layers(self) -> List[str]:
        return [name for name, state in self.states.items() if isinstance(state, BalNormState)]

    def forward(
        self,
        x: Union[Node, ArrayLike],
        mode: Union[Mode, str] = Mode.TRAIN,
        params: Optional[Mapping[str, Node]] = None,
        update_stats: bool = True,
        frozen_sums: Optional[Mapping[str, np.ndarray]] = None,
    ) -> Node:
        """Run the network and return logits ``[B, K]``.

        ``params`` supplies the parameter nodes to differentiate against (constants
        from ``self.params`` otherwise). ``frozen_sums`` pins the channel sums of
        named balanced layers to fixed values in train mode.
        """
        mode = Mode(mode)
        params = params if params is not None else {k: Node(v) for k, v in self.params.items()}
        out = as_node(x)
        for name, spec in zip(self.layer_names, self.specs):
            try:
                out = self._layer_forward(name, spec, out, mode, params, update_stats, frozen_sums)
            except BalNormError as e:
                e.layer = e.layer or name
                logger.error(f"Forward pass failed in {name}: {e.message}")
                raise
        return out

    def _layer_forward(self, name, spec, x, mode, params, update_stats, frozen_sums) -> Node:
        if spec.kind is LayerKind.RELU:
            return x.relu()
        if spec.kind is LayerKind.GLOBAL_AVG_POOL:
            return x.mean(axis=(2, 3))
        if spec.kind is LayerKind.LINEAR:
            return matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]

        if x.value.ndim != 4 or x.shape[1] != spec.in_channels:
            raise ShapeMismatchError(f"{name} input", f"[B,{spec.in_channels},H,W]", x.shape)
        w = params[f"{name}.weight"]
        conv_spec = spec.conv_spec
        if spec.norm.is_balanced:
            state = self.states[name]
            geom = NormGeometry.for_conv(x.shape, w.shape, conv_spec)
            sums = frozen_sums.get(name) if frozen_sums else None
            w2 = balnorm_transform(w, x, state, geom, mode, update_stats=update_stats, channel_sums=sums)
            out = conv2d(x, w2, conv_spec)
            gain = params[f"{name}.gain"].reshape(1, -1, 1, 1)
            bias = params[f"{name}.bias"].reshape(1, -1, 1, 1)
            return out * gain + bias
        out = conv2d(x, w, conv_spec)
        if spec.norm is NormKind.BATCHNORM:
            return batchnorm_forward(
                out, self.states[name], mode, params[f"{name}.gamma"], params[f"{name}.beta"], update_stats
            )
        return identity_forward(out)

    def sync_states(self) -> None:
        """Copy trained affine parameters into the normalization states."""
        for name, state in self.states.items():
            if isinstance(state, BalNormState):
                state.post_affine_gain = self.params[f"{name}.gain"].copy()
                state.post_affine_bias = self.params[f"{name}.bias"].copy()
            else:
                state.gamma = self.params[f"{name}.gamma"].copy()
                state.beta = self.params[f"{name}.beta"].copy()


def forward(net: Network, x: Union[Node, ArrayLike], mode: Union[Mode, str] = Mode.TRAIN, **kwargs) -> Node:
    return net.forward(x, mode, **kwargs)


def he_normal(shape, rng: np.random.Generator) -> np.ndarray:
    channels_out, _, kh, kw = shape
    return rng.normal(0.0, math.sqrt(2.0 / (channels_out * kh * kw)), size=shape)


def build_network(
    specs: Sequence[LayerSpec],
    seed: int = 0,
    stat_fraction: float = 1.0,
    momentum: float = 0.1,
    stop_grad_v: bool = False,
) -> Network:
    """Initialize parameters and states for ``specs`` deterministically from ``seed``."""
    validate_layers(specs)
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    states: Dict[str, Union[BalNormState, BatchNormState]] = {}
    for i, spec in enumerate(specs):
        name = f"{spec.kind.value}{i}"
        if spec.kind is LayerKind.CONV:
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            if spec.norm.is_balanced:
                params[f"{name}.weight"] = balanced_init(shape, int(rng.integers(2**32)))
                variant = NormVariant.SINGLE_PASS if spec.norm is NormKind.BALNORM_SINGLE else NormVariant.TWO_PASS
                state = BalNormState.create(
                    spec.out_channels, spec.in_channels, variant, stat_fraction, momentum, stop_grad_v
                )
                states[name] = state
                params[f"{name}.gain"] = state.post_affine_gain.copy()
                params[f"{name}.bias"] = state.post_affine_bias.copy()
            else:
                params[f"{name}.weight"] = he_normal(shape, rng)
                if spec.norm is NormKind.BATCHNORM:
                    state = BatchNormState.create(spec.out_channels, momentum=momentum)
                    states[name] = state
                    params[f"{name}.gamma"] = state.gamma.copy()
                    params[f"{name}.beta"] = state.beta.copy()
        elif spec.kind is LayerKind.LINEAR:
            bound = 1.0 / math.sqrt(spec.in_channels)
            params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(spec.in_channels, spec.out_channels))
            params[f"{name}.bias"] = np.zeros(spec.out_channels)
    logger.debug(f"Built network with {len(specs)} layers and {sum(p.size for p in params.values())} parameters")
    return Network(specs, params, states, stat_fraction, momentum, stop_grad_v)


def tinynet_specs(
    norm: Union[NormKind, str] = NormKind.BALNORM_SINGLE,
    num_classes: int = 10,
    in_channels: int = 3,
    padding_mode: Union[PaddingMode, str] = PaddingMode.CYCLIC,
    widths: Sequence[int] = (16, 32, 32),
) -> List[LayerSpec]:
    """conv3x3 -> ReLU -> conv3x3/2 -> ReLU -> conv3x3 -> ReLU -> pool -> linear."""
    norm = NormKind.from_flag(norm) if isinstance(norm, str) else norm
    c1, c2, c3 = widths
    return [
        LayerSpec.conv(in_channels, c1, 3, 1, padding_mode, norm),
        LayerSpec.relu(),
        LayerSpec.conv(c1, c2, 3, 2, padding_mode, norm),
        LayerSpec.relu(),
        LayerSpec.conv(c2, c3, 3, 1, padding_mode, norm),
        LayerSpec.relu(),
        LayerSpec.pool(),
        LayerSpec.linear(c3, num_classes),
    ]


def build_tinynet(norm: Union[NormKind, str] = NormKind.BALNORM_SINGLE, num_classes: int = 10, seed: int = 0,
                  in_channels: int = 3, padding_mode: Union[PaddingMode, str] = PaddingMode.CYCLIC,
                  stat_fraction: float = 1.0, stop_grad_v: bool = False) -> Network:
    specs = tinynet_specs(norm, num_classes, in_channels, padding_mode)
    return build_network(specs, seed=seed, stat_fraction=stat_fraction, stop_grad_v=stop_grad_v)


def gradcheck_specs(norm: Union[NormKind, str] = NormKind.BALNORM_SINGLE, num_classes: int = 3,
                    padding_mode: Union[PaddingMode, str] = PaddingMode.CYCLIC) -> List[LayerSpec]:
    """Two 4-channel conv layers for end-to-end gradient checks."""
    norm = NormKind.from_flag(norm) if isinstance(norm, str) else norm
    return [
        LayerSpec.conv(3, 4, 3, 1, padding_mode, norm),
        LayerSpec.relu(),
        LayerSpec.conv(4, 4, 3, 1, padding_mode, norm),
        LayerSpec.relu(),
        LayerSpec.pool(),
        LayerSpec.linear(4, num_classes),
    ]


def cross_entropy_loss(logits: Union[Node, ArrayLike], targets: ArrayLike) -> Node:
    """Mean over the batch of -sum_k t_k log softmax(logits)_k.

    ``targets`` is either integer labels ``[B]`` or soft labels ``[B, K]`` whose
    rows sum to one.
    """
    logits = as_node(logits)
    if not np.isfinite(logits.value).all():
        raise NonFiniteError("logits contain non-finite values")
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = one_hot(targets, logits.shape[1])
    targets = targets.astype(np.float64)
    if targets.shape != logits.shape:
        raise ShapeMismatchError("soft-label targets", logits.shape, targets.shape)
    if not np.allclose(targets.sum(axis=1), 1.0, atol=1e-9):
        raise ConfigurationError("soft-label rows must sum to 1")

    shifted = logits - logits.value.max(axis=1, keepdims=True)
    log_norm = shifted.exp().sum(axis=1, keepdims=True).log()
    log_probs = shifted - log_norm
    return -(log_probs * targets).sum() / float(logits.shape[0])


def _write_manifest(path: Path, net: Network) -> Dict[str, str]:
    manifest = {
        "format": "balnorm-checkpoint",
        "version": "1",
        "layers": str(len(net.specs)),
        "stat_fraction": repr(net.stat_fraction),
        "momentum": repr(net.momentum),
        "stop_grad_v": str(net.stop_grad_v).lower(),
    }
    for i, spec in enumerate(net.specs):
        for key, value in spec.to_manifest().items():
            manifest[f"layer.{i}.{key}"] = value
    with open(path, "w") as f:
        f.writelines(f"{key}={value}\n" for key, value in manifest.items())
    return manifest


def read_manifest(path: Union[str, Path]) -> Dict[str, str]:
    manifest: Dict[str, str] = {}
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            manifest[key] = value
    config.validate_document(manifest, config.CHECKPOINT_MANIFEST_SCHEMA)
    return manifest


def save_checkpoint(net: Network, path: Union[str, Path]) -> Path:
    """Write parameter and state records to ``path`` and the layer manifest to ``path.manifest``."""
    path = Path(path)
    net.sync_states()
    with open(path, "wb") as f:
        for name, spec in zip(net.layer_names, net.specs):
            if spec.kind is LayerKind.CONV:
                state = net.states.get(name)
                if isinstance(state, BalNormState):
                    dump_balnorm_state(f, net.params[f"{name}.weight"], state)
                    continue
                write_bnt1(f, net.params[f"{name}.weight"])
                if isinstance(state, BatchNormState):
                    dump_batchnorm_state(f, state)
            elif spec.kind is LayerKind.LINEAR:
                write_bnt1(f, net.params[f"{name}.weight"])
                write_bnt1(f, net.params[f"{name}.bias"])
    manifest_path = path.with_name(path.name + ".manifest")
    _write_manifest(manifest_path, net)
    logger.info(f"Checkpoint written to {path} (manifest {manifest_path})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Network:
    path = Path(path)
    manifest = read_manifest(path.with_name(path.name + ".manifest"))
    count = int(manifest["layers"])
    specs = []
    for i in range(count):
        prefix = f"layer.{i}."
        specs.append(LayerSpec.from_manifest({k[len(prefix):]: v for k, v in manifest.items() if k.startswith(prefix)}))
    stat_fraction = float(manifest["stat_fraction"])
    momentum = float(manifest["momentum"])
    stop_grad_v = manifest["stop_grad_v"] == "true"
    net = build_network(specs, seed=0, stat_fraction=stat_fraction, momentum=momentum, stop_grad_v=stop_grad_v)

    with open(path, "rb") as f:
        for name, spec in zip(net.layer_names, net.specs):
            if spec.kind is LayerKind.CONV:
                state = net.states.get(name)
                if isinstance(state, BalNormState):
                    w, loaded = load_balnorm_state(f, stat_fraction, momentum, stop_grad_v)
                    net.params[f"{name}.weight"] = w
                    net.params[f"{name}.gain"] = loaded.post_affine_gain.copy()
                    net.params[f"{name}.bias"] = loaded.post_affine_bias.copy()
                    net.states[name] = loaded
                    continue
                net.params[f"{name}.weight"] = read_bnt1(f)
                if isinstance(state, BatchNormState):
                    loaded = load_batchnorm_state(f, state.eps, momentum)
                    net.params[f"{name}.gamma"] = loaded.gamma.copy()
                    net.params[f"{name}.beta"] = loaded.beta.copy()
                    net.states[name] = loaded
            elif spec.kind is LayerKind.LINEAR:
                net.params[f"{name}.weight"] = read_bnt1(f)
                net.params[f"{name}.bias"] = read_bnt1(f)
    logger.info(f"Checkpoint loaded from {path}")
    return net
