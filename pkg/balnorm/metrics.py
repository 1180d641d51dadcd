"""Per-epoch metrics records, CSV IO and multi-run percentile bands."""

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger

from .errors import ConfigurationError, EpochOutOfRangeError, FormatError, MisalignedEpochsError

BAND_QUANTILES = {"p25": 0.25, "p50": 0.5, "p75": 0.75}


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    lr: float
    wall_seconds: float = 0.0


METRIC_COLUMNS = [f.name for f in fields(MetricsRecord)]
VALUE_COLUMNS = [name for name in METRIC_COLUMNS if name != "epoch"]


def check_epochs(records: Sequence[MetricsRecord], source: str = "run") -> None:
    epochs = [r.epoch for r in records]
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ConfigurationError(f"{source}: epochs must be strictly increasing, got {epochs}")


def records_to_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in records], columns=METRIC_COLUMNS)


def write_metrics_csv(records: Sequence[MetricsRecord], path: Union[str, Path]) -> Path:
    """Header plus one newline-terminated row per epoch, ``.`` as decimal separator."""
    check_epochs(records, str(path))
    path = Path(path)
    records_to_frame(records).to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
    logger.info(f"Metrics written to {path}")
    return path


def read_metrics_csv(path: Union[str, Path]) -> List[MetricsRecord]:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(f"cannot read metrics CSV {path}: {e}") from e
    missing = [c for c in METRIC_COLUMNS if c not in frame.columns]
    if missing:
        raise FormatError(f"{path}: missing columns {', '.join(missing)}")
    records = [
        MetricsRecord(int(row.epoch), *(float(getattr(row, c)) for c in VALUE_COLUMNS))
        for row in frame[METRIC_COLUMNS].itertuples(index=False)
    ]
    check_epochs(records, str(path))
    return records


@dataclass
class AggregateBand:
    """Point-wise p25/p50/p75 per epoch for every metric over ``run_count`` runs."""

    epochs: List[int]
    bands: Dict[str, Dict[str, np.ndarray]]
    run_count: int

    def to_frame(self) -> pd.DataFrame:
        columns: Dict[str, object] = {"epoch": self.epochs}
        for metric in VALUE_COLUMNS:
            for label in BAND_QUANTILES:
                columns[f"{metric}_{label}"] = self.bands[metric][label]
        frame = pd.DataFrame(columns)
        frame["runs"] = self.run_count
        return frame


def aggregate(runs: Union[Sequence[Sequence[MetricsRecord]], Mapping[str, Sequence[MetricsRecord]]]) -> AggregateBand:
    """Percentiles across runs at each epoch, by linear interpolation at position q*(n-1).

    ``runs`` may be a mapping from a run label (usually its file name) to records
    so misaligned runs can be named.
    """
    if not isinstance(runs, Mapping):
        runs = {f"run {i}": records for i, records in enumerate(runs)}
    if not runs:
        raise ConfigurationError("aggregation needs at least one run")

    labels = list(runs)
    grid = [r.epoch for r in runs[labels[0]]]
    if not grid:
        raise ConfigurationError(f"{labels[0]} has no epochs")
    misaligned = [label for label in labels[1:] if [r.epoch for r in runs[label]] != grid]
    if misaligned:
        raise MisalignedEpochsError(misaligned)

    bands: Dict[str, Dict[str, np.ndarray]] = {}
    for metric in VALUE_COLUMNS:
        values = np.array([[getattr(r, metric) for r in runs[label]] for label in labels])
        bands[metric] = {
            label: np.quantile(values, q, axis=0, method="linear") for label, q in BAND_QUANTILES.items()
        }
    return AggregateBand(epochs=grid, bands=bands, run_count=len(labels))


def write_aggregate_csv(band: AggregateBand, path: Union[str, Path]) -> Path:
    path = Path(path)
    band.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
    logger.info(f"Aggregate of {band.run_count} runs written to {path}")
    return path


def median_at(band: AggregateBand, metric: str, epoch: int) -> float:
    if epoch not in band.epochs:
        raise EpochOutOfRangeError(f"epoch {epoch} not in aggregated epochs {band.epochs[0]}..{band.epochs[-1]}")
    return float(band.bands[metric]["p50"][band.epochs.index(epoch)])


def convergence_ordering(bands: Mapping[str, AggregateBand], early_epoch: int = 3) -> Dict[str, bool]:
    """Directional comparison of median train loss across normalization runs.

    BalNorm must end below the unnormalized net and be ahead of BatchNorm at
    ``early_epoch``.
    """
    missing = [norm for norm in ("balnorm", "batchnorm", "none") if norm not in bands]
    if missing:
        raise ConfigurationError(f"convergence comparison needs aggregates for {missing}")
    final = bands["balnorm"].epochs[-1]
    return {
        f"balnorm below none at epoch {final}": median_at(bands["balnorm"], "train_loss", final)
        < median_at(bands["none"], "train_loss", final),
        f"balnorm below batchnorm at epoch {early_epoch}": median_at(bands["balnorm"], "train_loss", early_epoch)
        < median_at(bands["batchnorm"], "train_loss", early_epoch),
    }
