"""Localization accuracy metrics: radial error tables, MRE, PCK."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError

Array = np.ndarray


def radial_errors(preds, gts, resolution: float = 1.0) -> Array:
    """Euclidean distance table: rows are test images, columns landmarks.

    ``resolution`` converts pixel distances to physical units (units per
    pixel); the desk benchmark uses 1.0 (plain pixels).
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 3 or preds.shape[2] != 2:
        raise DimensionError(f"radial_errors: preds {preds.shape} vs gts {gts.shape}")
    if resolution <= 0.0:
        raise ConfigurationError(f"radial_errors: resolution must be positive, got {resolution}")
    diff = preds - gts
    return resolution * np.sqrt((diff * diff).sum(axis=-1))


@dataclass(frozen=True)
class MreSummary:
    per_landmark: Array      # column means, one per landmark
    mean: float              # mean over all (image, landmark) distances
    sd: float                # population SD over all entries


def mre(table: Array) -> MreSummary:
    """Mean radial error per landmark plus an all-entries mean and SD.

    The overall mean and standard deviation pool every (image, landmark)
    distance; the SD is the population SD (no Bessel correction).
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.size == 0:
        raise ConfigurationError(f"mre: need a non-empty 2d table, got shape {table.shape}")
    return MreSummary(
        per_landmark=table.mean(axis=0),
        mean=float(table.mean()),
        sd=float(table.std()),
    )


def pck(table: Array, r: float) -> float:
    """Percentage of detections with distance strictly below ``r``."""
    table = np.asarray(table, dtype=np.float64)
    if r <= 0.0:
        raise ConfigurationError(f"pck: threshold must be positive, got {r}")
    return float((table < r).sum() / table.size * 100.0)


def write_error_table(path: str | Path, table: Array) -> None:
    table = np.asarray(table, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "landmark", "distance"])
        for i in range(table.shape[0]):
            for j in range(table.shape[1]):
                writer.writerow([i, j, repr(float(table[i, j]))])


def read_error_table(path: str | Path) -> Array:
    path = Path(path)
    rows: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image", "landmark", "distance"]:
            raise FormatError(f"{path}: bad error-table header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            try:
                i, j, d = int(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}: bad row at line {lineno}: {row!r}") from exc
            rows.setdefault(i, {})[j] = d
    if not rows:
        raise FormatError(f"{path}: empty error table")
    n_img = max(rows) + 1
    n_lm = max(max(cols) for cols in rows.values()) + 1
    table = np.zeros((n_img, n_lm))
    for i, cols in rows.items():
        for j, d in cols.items():
            table[i, j] = d
    return table
