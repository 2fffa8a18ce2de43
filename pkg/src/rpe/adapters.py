"""Parameter containers and the linear merge ``theta0 + sum_i w_i * delta_i``.

Tensors are plain float64 numpy arrays, made read-only once they enter a
container. Low-rank factor pairs store ``up`` with shape ``(m, r)`` and ``down``
with shape ``(r, n)``; their dense delta is ``up @ down``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import ShapeError, StructureError

__all__ = [
    "LowRankPair",
    "AdapterDelta",
    "BaseParameters",
    "as_tensor",
    "materialize",
    "weighted_sum",
    "apply",
    "negate",
]


def as_tensor(values, name: str = "tensor") -> np.ndarray:
    """Copy ``values`` into a read-only C-contiguous float64 array.

    Raises :class:`ShapeError` for zero-sized dimensions and ``ValueError`` for
    non-finite values.
    """
    arr = np.array(values, dtype=np.float64, order="C", copy=True)
    if arr.ndim == 0:
        raise ShapeError(f"{name}: scalar tensors are not supported")
    if any(d <= 0 for d in arr.shape):
        raise ShapeError(f"{name}: all dimensions must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: tensor contains NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LowRankPair:
    up: np.ndarray
    down: np.ndarray

    def __post_init__(self):
        up = as_tensor(self.up, "up")
        down = as_tensor(self.down, "down")
        if up.ndim != 2 or down.ndim != 2:
            raise ShapeError(
                f"low-rank factors must be 2-D, got up{up.shape} down{down.shape}"
            )
        object.__setattr__(self, "up", up)
        object.__setattr__(self, "down", down)

    @property
    def rank(self) -> int:
        return self.up.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.up.shape[0], self.down.shape[1])

    def check(self, name: str = "<pair>") -> None:
        if self.up.shape[1] != self.down.shape[0]:
            raise ShapeError(
                f"parameter {name!r}: inner dimensions disagree, "
                f"up{self.up.shape} x down{self.down.shape}"
            )

    def dense(self, name: str = "<pair>") -> np.ndarray:
        self.check(name)
        out = self.up @ self.down
        out.setflags(write=False)
        return out


Tensor = Union[np.ndarray, LowRankPair]


class _ParameterMap(Mapping):
    """Immutable ordered name -> tensor map."""

    def __init__(self, entries: Mapping | None = None):
        self._entries: dict = {}
        for name, value in (entries or {}).items():
            if not isinstance(name, str) or not name:
                raise StructureError(f"parameter names must be non-empty strings, got {name!r}")
            self._entries[name] = self._coerce(name, value)

    def _coerce(self, name, value):
        return as_tensor(value, name)

    def __getitem__(self, name):
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self):
        inner = ", ".join(f"{k}: {shape_of(v)}" for k, v in self._entries.items())
        return f"{type(self).__name__}({{{inner}}})"

    def signature(self) -> list[tuple[str, tuple[int, ...]]]:
        """(name, materialized shape) pairs in insertion order."""
        return [(k, shape_of(v)) for k, v in self._entries.items()]


def shape_of(value: Tensor) -> tuple[int, ...]:
    if isinstance(value, LowRankPair):
        return value.shape
    return tuple(value.shape)


class AdapterDelta(_ParameterMap):
    """Named parameter deltas; each entry is a dense array or a :class:`LowRankPair`."""

    def _coerce(self, name, value):
        if isinstance(value, LowRankPair):
            value.check(name)
            return value
        return as_tensor(value, name)

    @property
    def is_dense(self) -> bool:
        return not any(isinstance(v, LowRankPair) for v in self._entries.values())


class BaseParameters(_ParameterMap):
    """Named dense parameters of the frozen base model."""


def materialize(delta: AdapterDelta) -> AdapterDelta:
    """Replace every low-rank pair by its dense product ``up @ down``."""
    if delta.is_dense:
        return delta
    return AdapterDelta(
        {
            name: value.dense(name) if isinstance(value, LowRankPair) else value
            for name, value in delta.items()
        }
    )


def _check_keys(reference: Sequence[str], other: Sequence[str], index: int) -> None:
    ref, oth = set(reference), set(other)
    if ref != oth:
        missing = sorted(ref - oth)
        extra = sorted(oth - ref)
        raise StructureError(
            f"adapter {index} parameter names differ from adapter 0: "
            f"missing {missing}, extra {extra}",
            missing=missing,
            extra=extra,
        )


def weighted_sum(
    deltas: Sequence[AdapterDelta],
    weights: Sequence[float],
    ids: Sequence[str] | None = None,
) -> AdapterDelta:
    """Dense ``sum_i weights[i] * materialize(deltas[i])``.

    Terms are accumulated left to right in float64. When ``ids`` is given the
    terms are first sorted by id, so jointly permuting ``(deltas, weights, ids)``
    yields a bit-identical result.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or len(deltas) != weights.shape[0]:
        raise ShapeError(
            f"got {len(deltas)} adapters but {weights.size} weights"
        )
    if len(deltas) == 0:
        raise ShapeError("weighted_sum needs at least one adapter")
    if not np.all(np.isfinite(weights)):
        raise ValueError("weights contain NaN or Inf")

    order = range(len(deltas))
    if ids is not None:
        if len(ids) != len(deltas):
            raise ShapeError(f"got {len(deltas)} adapters but {len(ids)} ids")
        order = sorted(order, key=lambda i: ids[i])

    dense = [materialize(d) for d in deltas]
    names = list(dense[0].keys())
    for i, d in enumerate(dense[1:], start=1):
        _check_keys(names, list(d.keys()), i)
        for name in names:
            if d[name].shape != dense[0][name].shape:
                raise ShapeError(
                    f"parameter {name!r}: adapter {i} has shape {d[name].shape}, "
                    f"adapter 0 has {dense[0][name].shape}"
                )

    merged = {}
    for name in names:
        acc = np.zeros(dense[0][name].shape, dtype=np.float64)
        for i in order:
            acc += weights[i] * dense[i][name]
        if not np.all(np.isfinite(acc)):
            raise ValueError(f"parameter {name!r}: merge overflowed")
        merged[name] = acc
    return AdapterDelta(merged)


def apply(base: BaseParameters, delta: AdapterDelta) -> BaseParameters:
    """Return ``base + delta`` on shared names and ``base`` elsewhere."""
    dense = materialize(delta)
    unknown = [name for name in dense if name not in base]
    if unknown:
        raise StructureError(
            f"delta has parameters absent from base: {unknown}", extra=unknown
        )
    out = {}
    for name, value in base.items():
        if name in dense:
            if dense[name].shape != value.shape:
                raise ShapeError(
                    f"parameter {name!r}: delta shape {dense[name].shape} "
                    f"does not match base shape {value.shape}"
                )
            out[name] = value + dense[name]
        else:
            out[name] = value
    return BaseParameters(out)


def negate(delta: AdapterDelta) -> AdapterDelta:
    return AdapterDelta({name: -value for name, value in materialize(delta).items()})
