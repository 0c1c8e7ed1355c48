"""Per-source feature blocks and their preprocessing.

Every source (search-trends analog, maps, busyness, weather/air quality,
external embeddings) lives in its own :class:`FeatureBlock`.  Blocks are
standardized column-wise, clipped at ``±c`` standard deviations and then
concatenated into the node input matrix of the graph model.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import NormalizationError, SchemaError, ValidationError

logger = logging.getLogger(__name__)

SOURCES = ("trends", "maps", "busyness", "weather_aq", "external")
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class FeatureBlock:
    source: str
    ids: tuple
    values: np.ndarray
    columns: tuple = field(default=())

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"unknown feature source {self.source!r}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError("feature block values must be a 2-d matrix")
        if values.shape[0] != len(self.ids):
            raise ValidationError(
                f"{self.source}: {values.shape[0]} rows for {len(self.ids)} ids")
        columns = tuple(self.columns) or tuple(
            f"{self.source}_{j}" for j in range(values.shape[1]))
        if len(columns) != values.shape[1]:
            raise ValidationError(f"{self.source}: column label count mismatch")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", columns)

    @property
    def width(self):
        return self.values.shape[1]

    def row_index(self):
        return {rid: i for i, rid in enumerate(self.ids)}

    def take(self, ids):
        """Rows for ``ids`` in the given order."""
        index = self.row_index()
        try:
            rows = [index[i] for i in ids]
        except KeyError as exc:
            raise SchemaError(f"{self.source}: no row for region {exc.args[0]!r}") from None
        return FeatureBlock(self.source, tuple(ids), self.values[rows], self.columns)


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    clip: float = 4.0
    columns: tuple = ()

    def __post_init__(self):
        if self.clip <= 0:
            raise ValidationError("clip bound must be positive")
        if np.any(np.asarray(self.std) < 0):
            raise ValidationError("standard deviations must be nonnegative")


def normalize_trends(counts):
    """Scale a nonnegative count vector so it sums to 100."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise NormalizationError("trend counts must be nonnegative")
    total = counts.sum()
    if not total > 0:
        raise NormalizationError("cannot normalize an all-zero trend vector")
    return (counts / total) * 100.0


def drop_sparse_rows(block, max_missing_fraction=0.98):
    """Remove rows whose fraction of missing (NaN or zero-count) entries
    exceeds ``max_missing_fraction``.  Returns the kept block and the
    dropped ids."""
    missing = np.isnan(block.values) | (block.values == 0)
    frac = missing.mean(axis=1)
    keep = frac <= max_missing_fraction
    dropped = [rid for rid, k in zip(block.ids, keep) if not k]
    if dropped:
        logger.info("%s: dropping %d sparse rows", block.source, len(dropped))
    kept_ids = [rid for rid, k in zip(block.ids, keep) if k]
    return FeatureBlock(block.source, kept_ids, block.values[keep], block.columns), dropped


def impute_column_means(block):
    values = block.values.copy()
    nan = np.isnan(values)
    if nan.any():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            col_mean = np.nan_to_num(np.nanmean(values, axis=0))
        values[nan] = np.take(col_mean, np.nonzero(nan)[1])
    return FeatureBlock(block.source, block.ids, values, block.columns)


def fit_standardizer(block, clip=4.0):
    """Column mean and population standard deviation, std floored at 1e-8."""
    if block.values.shape[0] == 0:
        raise ValidationError("cannot fit a standardizer on an empty block")
    values = impute_column_means(block).values
    mean = values.mean(axis=0)
    std = np.maximum(values.std(axis=0), STD_FLOOR)
    return StandardizationStats(mean=mean, std=std, clip=float(clip), columns=block.columns)


def apply_standardizer(block, stats):
    if stats.columns and tuple(stats.columns) != tuple(block.columns):
        raise SchemaError(f"{block.source}: columns differ from the fitted standardizer")
    if block.width != len(stats.mean):
        raise SchemaError(
            f"{block.source}: width {block.width} != fitted width {len(stats.mean)}")
    values = block.values
    if np.isnan(values).any():
        values = np.where(np.isnan(values), stats.mean, values)
    z = (values - stats.mean) / stats.std
    return FeatureBlock(block.source, block.ids, np.clip(z, -stats.clip, stats.clip),
                        block.columns)


def aggregate_to_county(block, membership: Mapping[str, str], county_ids: Sequence[str] | None = None):
    """Unweighted mean of member postal rows per county.

    ``membership`` maps postal id to county id.  Counties listed in
    ``county_ids`` that have no members are dropped with a warning.
    """
    index = block.row_index()
    members = {}
    for postal, county in membership.items():
        if postal not in index:
            raise SchemaError(f"{block.source}: postal {postal!r} has no feature row")
        members.setdefault(county, []).append(index[postal])
    if county_ids is None:
        county_ids = sorted(members)
    out_ids, rows = [], []
    for county in county_ids:
        idx = members.get(county)
        if not idx:
            logger.warning("county %s has no postal members; excluded", county)
            continue
        out_ids.append(county)
        rows.append(block.values[sorted(idx)].mean(axis=0))
    values = np.vstack(rows) if rows else np.zeros((0, block.width))
    return FeatureBlock(block.source, out_ids, values, block.columns)


def concat_blocks(blocks: Sequence[FeatureBlock]):
    """Stack blocks column-wise.

    Returns the node input matrix and a provenance map
    ``source -> (start, stop)`` over its columns.
    """
    if not blocks:
        raise SchemaError("no feature blocks to concatenate")
    ids = blocks[0].ids
    provenance, start = {}, 0
    for b in blocks:
        if b.ids != ids:
            raise SchemaError(f"{b.source}: row ordering differs from {blocks[0].source}")
        provenance[b.source] = (start, start + b.width)
        start += b.width
    return np.hstack([b.values for b in blocks]), provenance
