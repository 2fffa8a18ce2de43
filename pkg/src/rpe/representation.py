"""Dataset representation vectors and set-to-set distances.

A dataset is summarized by the coordinatewise mean of its per-item feature
vectors. The set distances (chamfer, nearest neighbour, mean) are kept for
experimentation; the retrieval pipeline only uses the mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError

__all__ = ["FeatureSet", "as_vector", "mean_pool", "set_distance", "SET_METRICS"]

SET_METRICS = ("chamfer", "nearest_neighbor", "mean")


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Read-only 1-D float64 copy of ``values``, rejecting empty or non-finite input."""
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ShapeError(f"{name} must have positive dimension")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureSet:
    """Per-item feature vectors of one dataset, stored as an ``(n_items, dim)`` array."""

    items: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        items = self.items
        if isinstance(items, (list, tuple)):
            if len(items) == 0:
                raise DomainError("feature set is empty")
            dims = {np.shape(v) for v in items}
            if len(dims) != 1:
                raise ShapeError(f"feature items have mixed shapes: {sorted(dims)}")
        arr = np.array(items, dtype=np.float64, copy=True)
        if arr.ndim == 1 and arr.size:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise ShapeError(f"feature items must form a 2-D array, got shape {arr.shape}")
        if arr.shape[0] == 0:
            raise DomainError("feature set is empty")
        if arr.shape[1] == 0:
            raise ShapeError("feature items must have positive dimension")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature items contain NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "items", arr)

    @property
    def dim(self) -> int:
        return self.items.shape[1]

    def __len__(self):
        return self.items.shape[0]


def mean_pool(features: FeatureSet) -> np.ndarray:
    # numpy reduces the contiguous last axis pairwise, so sum over a transposed copy
    cols = np.ascontiguousarray(features.items.T)
    out = cols.sum(axis=1) / cols.shape[1]
    out.setflags(write=False)
    return out


def _cross_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def set_distance(a: FeatureSet, b: FeatureSet, metric: str = "chamfer") -> float:
    if a.dim != b.dim:
        raise ShapeError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    if metric == "mean":
        return float(np.linalg.norm(mean_pool(a) - mean_pool(b)))
    if metric not in SET_METRICS:
        raise DomainError(f"unknown set metric {metric!r}; expected one of {SET_METRICS}")
    d = _cross_distances(a.items, b.items)
    if metric == "nearest_neighbor":
        return float(d.min())
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())
