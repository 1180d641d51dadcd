"""Datasets: CIFAR-10 binary batches, BNT1 tensors and synthetic blobs, plus augmentation.

Pixels are scaled to [0, 1] and never mean-subtracted; the first convolution sees
non-negative input.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .errors import ConfigurationError, FormatError, LabelOutOfRangeError, ShapeMismatchError, TruncatedFileError
from .tensor import load_bnt1

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_CLASSES = 10
CIFAR_RECORD = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_DEFAULT_SUBSET = 5000

BNT1_SPLITS = ("train", "test")

# Prototype geometry for synth_blobs; fixed so every seed shares the same classes.
SYNTH_PROTOTYPE_SEED = 20170519
SYNTH_DEFAULT_TRAIN = 4000
SYNTH_GREY = 0.55
SYNTH_HUE_SPREAD = 0.25
SYNTH_NOISE = 0.3


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ShapeMismatchError("dataset images rank", 4, images.ndim)
        if images.shape[0] < 1:
            raise ConfigurationError("a dataset needs at least one instance")
        if labels.shape != (images.shape[0],):
            raise ShapeMismatchError("dataset labels", (images.shape[0],), labels.shape)
        if images.min() < 0.0 or images.max() > 1.0:
            raise ConfigurationError("dataset pixels must lie in [0, 1]")
        bad = np.flatnonzero((labels < 0) | (labels >= self.num_classes))
        if bad.size:
            raise LabelOutOfRangeError(
                f"label {labels[bad[0]]} at index {bad[0]} outside [0, {self.num_classes})"
            )
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def head(self, count: int) -> "Dataset":
        """The first ``count`` instances in storage order."""
        return Dataset(self.images[:count], self.labels[:count], self.num_classes)


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRangeError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def parse_cifar10_records(raw: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise TruncatedFileError(source, len(raw) - len(raw) % CIFAR_RECORD)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise LabelOutOfRangeError(
            f"{source}: label {labels[bad[0]]} in record {bad[0]} (byte offset {bad[0] * CIFAR_RECORD})"
        )
    images = records[:, 1:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE) / 255.0
    return images, labels


def load_cifar10_binary(paths: Union[str, Path, Sequence[Union[str, Path]]]) -> Dataset:
    """Read CIFAR-10 binary batch files: per record one label byte and R, G, B 32x32 planes."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for path in paths:
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise ConfigurationError(f"cannot read CIFAR-10 file {path}: {e}") from e
        x, y = parse_cifar10_records(raw, str(path))
        images.append(x)
        labels.append(y)
        logger.debug(f"Read {len(y)} CIFAR-10 records from {path}")
    if not images:
        raise ConfigurationError("no CIFAR-10 files given")
    return Dataset(np.concatenate(images), np.concatenate(labels), CIFAR_CLASSES)


def dump_cifar10_binary(dataset: Dataset) -> bytes:
    """Serialize 3x32x32 images back into the CIFAR-10 record layout."""
    if dataset.image_shape != (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE):
        raise ShapeMismatchError("CIFAR-10 image", (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE), dataset.image_shape)
    if dataset.num_classes > 256:
        raise FormatError("CIFAR-10 labels must fit in one byte")
    pixels = np.rint(dataset.images.reshape(len(dataset), -1) * 255.0).astype(np.uint8)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    return records.tobytes()


def load_cifar10_dir(directory: Union[str, Path], subset: Optional[int] = CIFAR_DEFAULT_SUBSET) -> Tuple[Dataset, Dataset]:
    """Train/test splits from the standard batch files.

    ``subset`` keeps the first ``subset`` train records and ``subset // 5`` test
    records in file order; ``None`` keeps everything.
    """
    directory = Path(directory)
    missing = [name for name in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE] if not (directory / name).is_file()]
    if missing:
        raise ConfigurationError(f"{directory} is missing CIFAR-10 files: {', '.join(missing)}")
    train = load_cifar10_binary([directory / name for name in CIFAR_TRAIN_FILES])
    test = load_cifar10_binary(directory / CIFAR_TEST_FILE)
    if subset is not None:
        train, test = train.head(subset), test.head(max(1, subset // 5))
    return train, test


def load_bnt1_dataset(images_path: Union[str, Path], labels_path: Union[str, Path], num_classes: int) -> Dataset:
    images = load_bnt1(images_path)
    labels = load_bnt1(labels_path)
    if labels.ndim != 1:
        raise ShapeMismatchError(f"{labels_path} rank", 1, labels.ndim)
    if not np.array_equal(labels, np.rint(labels)):
        raise FormatError(f"{labels_path}: labels must be whole numbers")
    # BNT1 stores float32; clip rounding noise at the range ends
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), num_classes)


def load_bnt1_dir(directory: Union[str, Path], num_classes: int) -> Tuple[Dataset, Dataset]:
    """``{train,test}_{images,labels}.bnt1`` inside ``directory``."""
    directory = Path(directory)
    splits = [
        load_bnt1_dataset(directory / f"{split}_images.bnt1", directory / f"{split}_labels.bnt1", num_classes)
        for split in BNT1_SPLITS
    ]
    return splits[0], splits[1]


def _synth_prototypes(classes: int, channels: int, size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(SYNTH_PROTOTYPE_SEED + 7919 * classes + 31 * channels + size)
    # colours sit close to a shared grey so hue, not brightness, carries the class
    colors = SYNTH_GREY + rng.uniform(-SYNTH_HUE_SPREAD, SYNTH_HUE_SPREAD, size=(classes, channels))
    angles = 2.0 * np.pi * (np.arange(classes) + rng.uniform(0.0, 0.5)) / classes
    radius = size / 5.0
    centers = np.stack([size / 2.0 + radius * np.sin(angles), size / 2.0 + radius * np.cos(angles)], axis=1)
    widths = rng.uniform(size / 10.0, size / 6.0, size=classes)
    return colors, centers, widths


def _render_blobs(centers: np.ndarray, sigma: np.ndarray, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cy, cx = centers[:, 0, None, None], centers[:, 1, None, None]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma[:, None, None] ** 2))


def synth_blobs(n: int, classes: int, seed: int, channels: int = 3, size: int = 16) -> Dataset:
    """Class-conditional Gaussian colour blobs on a noisy background.

    Class positions overlap and every image also carries a fainter distractor
    blob tinted like a random class at a random place, so the task stays
    separable without being solved in the first few steps.
    """
    if classes < 1 or n < classes:
        raise ConfigurationError(f"synth_blobs needs n >= classes >= 1, got n={n}, classes={classes}")
    colors, centers, widths = _synth_prototypes(classes, channels, size)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)

    jitter = rng.normal(0.0, size / 7.0, size=(n, 2))
    blob = _render_blobs(centers[labels] + jitter, widths[labels], size)
    tint = colors[labels] * rng.uniform(0.7, 1.3, size=(n, 1))

    distractor_classes = rng.integers(0, classes, size=n)
    distractor_at = rng.uniform(0.0, size - 1.0, size=(n, 2))
    distractor = _render_blobs(distractor_at, widths[distractor_classes], size)
    distractor_tint = colors[distractor_classes] * rng.uniform(0.2, 0.45, size=(n, 1))

    background = rng.uniform(0.0, SYNTH_NOISE, size=(n, channels, size, size))
    images = background + tint[:, :, None, None] * blob[:, None]
    images += distractor_tint[:, :, None, None] * distractor[:, None]
    return Dataset(np.clip(images, 0.0, 1.0), labels, classes)


def load_dataset(
    flag: str, subset: Optional[int] = None, num_classes: int = 4, image_size: int = 16, seed: int = 0
) -> Tuple[Dataset, Dataset]:
    """Resolve a ``--dataset`` value (``synth``, ``cifar10:<dir>``, ``bnt1:<dir>``) to train/test splits."""
    if flag == "synth":
        n = subset or SYNTH_DEFAULT_TRAIN
        train = synth_blobs(n, num_classes, seed, size=image_size)
        test = synth_blobs(max(num_classes, n // 5), num_classes, seed + 1_000_003, size=image_size)
    elif flag.startswith("cifar10:"):
        train, test = load_cifar10_dir(flag[len("cifar10:"):], subset if subset is not None else CIFAR_DEFAULT_SUBSET)
    elif flag.startswith("bnt1:"):
        train, test = load_bnt1_dir(flag[len("bnt1:"):], num_classes)
        if subset is not None:
            train, test = train.head(subset), test.head(max(1, subset // 5))
    else:
        raise ConfigurationError(f"unknown dataset {flag!r}; expected synth, cifar10:<dir> or bnt1:<dir>")
    logger.info(f"Loaded dataset {flag}: {len(train)} train / {len(test)} test, images {train.image_shape}")
    return train, test


@dataclass(frozen=True)
class AugmentSpec:
    hflip_prob: float = 0.5
    pad: int = 4
    crop: int = 32

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigurationError(f"hflip probability must lie in [0, 1], got {self.hflip_prob}")
        if self.pad < 0 or self.crop < 1:
            raise ConfigurationError(f"bad pad/crop ({self.pad}, {self.crop})")

    @classmethod
    def for_dataset(cls, flag: str, image_size: int) -> "AugmentSpec":
        if flag.startswith("cifar10:"):
            return cls(0.5, 4, CIFAR_SIDE)
        return cls(0.5, 2, image_size)


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1].copy()


def augment(batch: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, then zero-pad and random crop, independently per instance."""
    batch = np.asarray(batch, dtype=np.float64)
    count, _, h, w = batch.shape
    if spec.crop > h + 2 * spec.pad or spec.crop > w + 2 * spec.pad:
        raise ConfigurationError(f"crop {spec.crop} exceeds padded size {h + 2 * spec.pad}x{w + 2 * spec.pad}")

    flips = rng.random(count) < spec.hflip_prob
    out = np.where(flips[:, None, None, None], hflip(batch), batch)
    if spec.pad == 0 and spec.crop == h and spec.crop == w:
        return out

    padded = np.pad(out, ((0, 0), (0, 0), (spec.pad, spec.pad), (spec.pad, spec.pad)))
    top = rng.integers(0, h + 2 * spec.pad - spec.crop + 1, size=count)
    left = rng.integers(0, w + 2 * spec.pad - spec.crop + 1, size=count)
    rows = top[:, None] + np.arange(spec.crop)[None, :]
    cols = left[:, None] + np.arange(spec.crop)[None, :]
    index = np.arange(count)[:, None, None]
    # [B, crop, crop, C] -> [B, C, crop, crop]
    cropped = padded.transpose(0, 2, 3, 1)[index, rows[:, :, None], cols[:, None, :]]
    return np.ascontiguousarray(cropped.transpose(0, 3, 1, 2))


def iterate_batches(
    dataset: Dataset, batch_size: int, rng: Optional[np.random.Generator] = None, shuffle: bool = True
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` mini-batches; the final batch may be short."""
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be positive, got {batch_size}")
    order = np.arange(len(dataset))
    if shuffle:
        if rng is None:
            raise ConfigurationError("shuffled batches need a random generator")
        order = rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        picked = order[start : start + batch_size]
        yield dataset.images[picked], dataset.labels[picked]
