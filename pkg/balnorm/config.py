"""Runtime configuration for the BalNorm engine.

Environment settings are read once at import, after ``.env`` is loaded. Training
runs are described by :class:`TrainConfig`, which can be seeded from a YAML file
and is always validated against ``schemas/train_config.schema.json``.
"""

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv
from jsonschema import Draft7Validator
from loguru import logger

from .errors import ConfigurationError

load_dotenv()

THREADS = int(os.environ.get("BALNORM_THREADS", "1"))

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "schemas"
TRAIN_CONFIG_SCHEMA = SCHEMA_DIR / "train_config.schema.json"
CHECKPOINT_MANIFEST_SCHEMA = SCHEMA_DIR / "checkpoint_manifest.schema.json"

NORM_CHOICES = ("balnorm", "balnorm-two-pass", "batchnorm", "none")
PADDING_CHOICES = ("cyclic", "zero")


def apply_thread_limits(threads: int = THREADS) -> None:
    """Export the thread cap to the BLAS/OpenMP pools numpy links against."""
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))


@dataclass
class TrainConfig:
    norm: str = "balnorm"
    dataset: str = "synth"
    subset: Optional[int] = None
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_scope: str = "all"
    schedule: str = "step:150,225"
    stat_fraction: float = 1.0
    mixup_alpha: float = 0.0
    seed: int = 0
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    padding: str = "cyclic"
    stop_grad_v: bool = False
    wall_clock: bool = False
    num_classes: int = 4
    image_size: int = 16

    def to_document(self) -> Dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}


def load_schema(path: Path) -> Dict[str, Any]:
    with open(path, "r") as f:
        return json.load(f)


def validate_document(document: Dict[str, Any], schema_path: Path) -> None:
    """Validate a JSON-compatible document, raising ConfigurationError with every problem."""
    validator = Draft7Validator(load_schema(schema_path))
    problems: List[str] = [
        f"{'/'.join(str(p) for p in err.path) or '<root>'}: {err.message}"
        for err in sorted(validator.iter_errors(document), key=lambda e: list(e.path))
    ]
    if problems:
        raise ConfigurationError(f"invalid document ({schema_path.name}): " + "; ".join(problems))


def load_yaml_config(path: str) -> Dict[str, Any]:
    """Read a YAML run description. Keys use the flag spelling with underscores."""
    try:
        with open(path, "r") as f:
            doc = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        logger.error(f"Error loading config file {path}: {e}")
        raise ConfigurationError(f"cannot read config file {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigurationError(f"config file {path} must contain a mapping")
    return {k.replace("-", "_"): v for k, v in doc.items()}


def build_train_config(overrides: Dict[str, Any], config_path: Optional[str] = None) -> TrainConfig:
    """Merge YAML defaults with explicit overrides and validate the result."""
    merged: Dict[str, Any] = {}
    if config_path:
        merged.update(load_yaml_config(config_path))
        logger.info(f"Loaded run configuration from {config_path}")
    merged.update({k: v for k, v in overrides.items() if v is not None})

    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")

    config = TrainConfig(**merged)
    validate_document(config.to_document(), TRAIN_CONFIG_SCHEMA)
    return config
