from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from otdro.core.errors import ConfigurationError, DataError
from otdro.core.models import SampleSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CsvSchema:
    """Which columns are features and which one, if any, is the label."""

    features: Optional[Sequence[str]] = None
    label: Optional[str] = None
    index: Optional[str] = None


def read_numeric_frame(path: str | Path, index: Optional[str] = None) -> pd.DataFrame:
    """Read a CSV as float64, reporting the first bad cell by 1-based file row and column."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {str(path)!r}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{str(path)!r} is empty") from None
    except pd.errors.ParserError as exc:
        raise DataError(f"{str(path)!r} has a malformed row: {exc}") from None
    if raw.empty:
        raise DataError(f"{str(path)!r} has a header but no rows")
    if index is not None:
        if index not in raw.columns:
            raise DataError(f"index column {index!r} not found in {str(path)!r}")
        raw = raw.set_index(index)

    frame = pd.DataFrame(index=raw.index)
    for column in raw.columns:
        cells = raw[column]
        parsed = pd.to_numeric(cells.str.strip(), errors="coerce")
        bad = parsed.isna().to_numpy() | cells.isna().to_numpy()
        if bad.any():
            position = int(np.argmax(bad))
            cell = cells.iloc[position]
            problem = "missing cell" if pd.isna(cell) or cell.strip() == "" else f"non-numeric cell {cell!r}"
            # header is file row 1
            raise DataError(f"{problem} in {str(path)!r}", row=position + 2, column=str(column))
        frame[column] = parsed.astype(np.float64)
    return frame


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> SampleSet:
    schema = schema or CsvSchema()
    frame = read_numeric_frame(path, schema.index)
    if schema.label is not None and schema.label not in frame.columns:
        raise DataError(f"label column {schema.label!r} not found in {str(path)!r}")
    if schema.features is None:
        features = [c for c in frame.columns if c != schema.label]
    else:
        missing = [c for c in schema.features if c not in frame.columns]
        if missing:
            raise DataError(f"feature columns {missing!r} not found in {str(path)!r}")
        features = list(schema.features)
    if not features:
        raise DataError(f"{str(path)!r} has no feature columns")
    labels = None if schema.label is None else frame[schema.label].to_numpy()
    logger.debug("loaded %d rows x %d features from %s", len(frame), len(features), path)
    return SampleSet(frame[features].to_numpy(), labels)


# ------------------------------------------------------------
# Synthetic generators
# ------------------------------------------------------------


def make_classification_sample(
    n: int, d: int, separation: float, rng: np.random.Generator
) -> SampleSet:
    """Two Gaussian classes with labels ±1 and means ±(separation/√d)·1."""
    if n < 2 or d < 1:
        raise ConfigurationError(f"need n >= 2 and d >= 1, got n={n!r}, d={d!r}")
    labels = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    rng.shuffle(labels)
    centre = np.full(d, separation / np.sqrt(d))
    points = labels[:, None] * centre + rng.standard_normal((n, d))
    return SampleSet(points, labels)


def make_regression_sample(
    n: int, d: int, noise: float, rng: np.random.Generator
) -> SampleSet:
    if n < 1 or d < 1:
        raise ConfigurationError(f"need n >= 1 and d >= 1, got n={n!r}, d={d!r}")
    points = rng.standard_normal((n, d))
    beta_true = rng.standard_normal(d) / np.sqrt(d)
    labels = points @ beta_true + noise * rng.standard_normal(n)
    return SampleSet(points, labels)


def make_return_series(
    months: int, assets: int, rng: np.random.Generator
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Monthly asset returns whose scale follows a persistent volatility index."""
    index = pd.Index(
        [str(p) for p in pd.period_range(start="2000-01", periods=months, freq="M")],
        name="month",
    )
    log_vol = np.empty(months)
    log_vol[0] = 0.0
    for t in range(1, months):
        log_vol[t] = 0.8 * log_vol[t - 1] + 0.25 * rng.standard_normal()
    vol = 0.2 * np.exp(log_vol)
    loadings = rng.uniform(0.5, 1.5, assets)
    idiosyncratic = rng.uniform(0.5, 1.0, assets)
    drift = rng.uniform(0.002, 0.012, assets)
    market = rng.standard_normal(months) * vol / np.sqrt(12)
    noise = rng.standard_normal((months, assets)) * idiosyncratic * 0.04
    returns = drift + market[:, None] * loadings + noise
    columns = [f"asset_{j + 1}" for j in range(assets)]
    return (
        pd.DataFrame(returns, index=index, columns=columns),
        pd.DataFrame({"vol": vol}, index=index),
    )
