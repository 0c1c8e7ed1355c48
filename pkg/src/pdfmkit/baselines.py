"""Inverse distance weighting on centroid coordinates (Shepard)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .graph import pairwise_distance_miles


@dataclass(frozen=True)
class IdwModel:
    coords: np.ndarray
    values: np.ndarray
    power: float = 2.0
    k: int = 32
    zero_tol: float = 1e-9

    def __post_init__(self):
        if not self.power > 0:
            raise ValidationError("IDW power must be positive")
        if self.k < 1:
            raise ValidationError("IDW neighbour count must be at least 1")


def idw_fit(coords, values, power=2.0, k=32):
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(values) == 0:
        raise ValidationError("IDW needs at least one training point")
    if len(coords) != len(values):
        raise ValidationError(f"{len(coords)} coordinates for {len(values)} values")
    return IdwModel(coords.copy(), values.copy(), float(power), int(k))


def idw_predict(model, query, chunk=2048):
    """Weighted mean of the ``k`` nearest training values, weights ``d^-p``.

    A query within ``zero_tol`` miles of training points returns the mean of
    those coincident values.  Distance ties at the k-th neighbour are broken
    by training value, which keeps results independent of point order.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1, 2)
    out = np.empty(len(query))
    k = min(model.k, len(model.values))
    for start in range(0, len(query), chunk):
        d = pairwise_distance_miles(query[start:start + chunk], model.coords)
        for i, row in enumerate(d):
            hit = row <= model.zero_tol
            if hit.any():
                out[start + i] = model.values[hit].mean()
                continue
            near = np.lexsort((model.values, row))[:k]
            w = row[near] ** -model.power
            out[start + i] = np.dot(w / w.sum(), model.values[near])
    return out


def idw_neighbors(model, query):
    """Indices of the training points each query draws on (for hull checks)."""
    query = np.asarray(query, dtype=np.float64).reshape(-1, 2)
    d = pairwise_distance_miles(query, model.coords)
    k = min(model.k, len(model.values))
    out = []
    for row in d:
        hit = np.nonzero(row <= model.zero_tol)[0]
        out.append(hit if len(hit) else np.lexsort((model.values, row))[:k])
    return out
