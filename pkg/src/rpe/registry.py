"""Persistent adapter registry with exact k-NN retrieval.

Directory layout::

    <root>/index.json
    <root>/registry.lock
    <root>/entries/<insertion_index>.vec
    <root>/entries/<insertion_index>.adp

Readers take a shared ``flock`` on ``registry.lock``; writers take an exclusive
one. Blobs are written before the index, and the index is replaced with a
rename, so a reader never sees an entry whose files are incomplete.

Every stored value is rounded through float32 on insertion, including in an
in-memory registry, so an in-memory registry and its reloaded copy retrieve
identically.
"""

from __future__ import annotations

import contextlib
import fcntl
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import formats
from .adapters import AdapterDelta
from .errors import ConflictError, DomainError, FormatError, SchemaError, ShapeError
from .representation import as_vector

log = logging.getLogger(__name__)

INDEX_VERSION = 1
INDEX_FILE = "index.json"
LOCK_FILE = "registry.lock"
ENTRY_DIR = "entries"


def squared_distances(refs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Row-wise ``||refs[i] - target||^2``."""
    refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 1 or refs.shape[1] != target.shape[0]:
        raise ShapeError(
            f"dimension mismatch: references have dim {refs.shape[1]}, "
            f"target has shape {target.shape}"
        )
    diff = np.ascontiguousarray(refs - target)
    return np.sum(diff * diff, axis=1)


def squared_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(squared_distances(a[None, :], b)[0])


def argsort_k(distances: Sequence[float], k: int | None = None) -> np.ndarray:
    """Indices of the ``k`` smallest distances, ascending; ties keep input order."""
    distances = np.asarray(distances, dtype=np.float64)
    n = distances.shape[0]
    if k is None:
        k = n
    if k < 1:
        raise DomainError(f"k must be positive, got {k}")
    if k > n:
        raise DomainError(f"k={k} exceeds the {n} available entries")
    return np.argsort(distances, kind="stable")[:k]


@dataclass(frozen=True)
class RegistryEntry:
    id: str
    representation: np.ndarray
    insertion_index: int
    metadata: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class RetrievalResult:
    ids: tuple[str, ...]
    squared_distances: np.ndarray

    def __len__(self):
        return len(self.ids)

    def __iter__(self) -> Iterator[tuple[str, float]]:
        return iter(zip(self.ids, (float(d) for d in self.squared_distances)))

    @property
    def distances(self) -> np.ndarray:
        return np.sqrt(self.squared_distances)


@contextlib.contextmanager
def _flock(path: Path, exclusive: bool):
    with open(path, "a+b") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH)
        try:
            yield
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def _signature_of(adapter: AdapterDelta) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(shape)) for name, shape in adapter.signature()]


class Registry:
    """Adapter deltas keyed by representation vectors.

    ``Registry()`` is purely in-memory. ``Registry.init(path)`` creates an
    on-disk registry and ``Registry.open(path)`` loads one; both persist every
    :meth:`add_entry`.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.dim: int | None = None
        self.signature: list[tuple[str, tuple[int, ...]]] | None = None
        self._entries: list[RegistryEntry] = []
        self._by_id: dict[str, int] = {}
        self._adapters: dict[str, AdapterDelta] = {}
        self._files: dict[str, tuple[str, str]] = {}
        self._matrix: np.ndarray | None = None

    # -- construction -------------------------------------------------

    @classmethod
    def init(cls, path) -> "Registry":
        path = Path(path)
        if (path / INDEX_FILE).exists():
            raise ConflictError(f"{path} already contains a registry")
        (path / ENTRY_DIR).mkdir(parents=True, exist_ok=True)
        reg = cls(path)
        with _flock(path / LOCK_FILE, exclusive=True):
            reg._write_index()
        return reg

    @classmethod
    def open(cls, path) -> "Registry":
        path = Path(path)
        if not (path / INDEX_FILE).is_file():
            raise FileNotFoundError(f"no registry index at {path / INDEX_FILE}")
        reg = cls(path)
        with _flock(path / LOCK_FILE, exclusive=False):
            reg._load()
        return reg

    def _load(self) -> None:
        index_path = self.path / INDEX_FILE
        try:
            index = json.loads(index_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{index_path}: invalid JSON: {exc}") from exc
        if index.get("version") != INDEX_VERSION:
            raise FormatError(f"{index_path}: unsupported version {index.get('version')!r}")
        self.dim = index.get("dim")
        sig = index.get("adapter_signature")
        self.signature = (
            [(item["name"], tuple(item["shape"])) for item in sig] if sig else None
        )
        self._entries, self._by_id, self._adapters, self._files = [], {}, {}, {}
        self._matrix = None
        for raw in index.get("entries", []):
            vec = formats.read_vector(self.path / raw["representation_file"])
            if vec.shape[0] != self.dim:
                raise SchemaError(
                    f"entry {raw['id']!r}: stored vector has dim {vec.shape[0]}, "
                    f"index declares {self.dim}"
                )
            vec.setflags(write=False)
            entry = RegistryEntry(
                id=raw["id"],
                representation=vec,
                insertion_index=int(raw["insertion_index"]),
                metadata=dict(raw.get("metadata") or {}),
            )
            self._by_id[entry.id] = len(self._entries)
            self._entries.append(entry)
            self._files[entry.id] = (raw["representation_file"], raw["adapter_file"])

    def _index_doc(self) -> dict:
        return {
            "version": INDEX_VERSION,
            "dim": self.dim,
            "adapter_signature": (
                [{"name": n, "shape": list(s)} for n, s in self.signature]
                if self.signature is not None
                else []
            ),
            "entries": [
                {
                    "id": e.id,
                    "insertion_index": e.insertion_index,
                    "representation_file": self._files[e.id][0],
                    "adapter_file": self._files[e.id][1],
                    "metadata": dict(e.metadata),
                }
                for e in self._entries
            ],
        }

    def _write_index(self) -> None:
        data = json.dumps(self._index_doc(), indent=2, ensure_ascii=False) + "\n"
        formats.atomic_write(self.path / INDEX_FILE, data.encode("utf-8"))

    # -- access -------------------------------------------------------

    def __len__(self):
        return len(self._entries)

    def __contains__(self, entry_id):
        return entry_id in self._by_id

    def __iter__(self) -> Iterator[RegistryEntry]:
        return iter(self._entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self._entries]

    def entry(self, entry_id: str) -> RegistryEntry:
        try:
            return self._entries[self._by_id[entry_id]]
        except KeyError:
            raise KeyError(f"no entry with id {entry_id!r}") from None

    def adapter(self, entry_id: str) -> AdapterDelta:
        """Adapter of ``entry_id``; on-disk adapters are read on first use."""
        self.entry(entry_id)
        if entry_id not in self._adapters:
            rel = self._files[entry_id][1]
            with _flock(self.path / LOCK_FILE, exclusive=False):
                self._adapters[entry_id] = formats.read_adapter(self.path / rel)
        return self._adapters[entry_id]

    def representations(self) -> np.ndarray:
        if self._matrix is None:
            if not self._entries:
                self._matrix = np.empty((0, self.dim or 0))
            else:
                self._matrix = np.stack([e.representation for e in self._entries])
            self._matrix.setflags(write=False)
        return self._matrix

    # -- mutation -----------------------------------------------------

    def _validate(self, entry_id, vec, adapter) -> None:
        if not isinstance(entry_id, str) or not entry_id:
            raise SchemaError(f"entry id must be a non-empty string, got {entry_id!r}")
        if entry_id in self._by_id:
            raise ConflictError(f"entry id {entry_id!r} already exists")
        if self.dim is not None and vec.shape[0] != self.dim:
            raise SchemaError(
                f"representation has dim {vec.shape[0]}, registry dim is {self.dim}"
            )
        sig = _signature_of(adapter)
        if self.signature is not None and dict(sig) != dict(self.signature):
            raise SchemaError(
                f"adapter signature {sig} does not match registry signature {self.signature}"
            )

    def add_entry(
        self,
        entry_id: str,
        representation,
        adapter: AdapterDelta,
        metadata: Mapping[str, str] | None = None,
    ) -> str:
        vec = formats.quantize_vector(as_vector(representation, "representation"))
        vec.setflags(write=False)
        adapter = formats.quantize_adapter(adapter)
        metadata = {str(k): str(v) for k, v in (metadata or {}).items()}

        if self.path is None:
            self._validate(entry_id, vec, adapter)
            self._append(entry_id, vec, adapter, metadata, None)
            return entry_id

        with _flock(self.path / LOCK_FILE, exclusive=True):
            # another process may have written since we loaded
            self._load()
            self._validate(entry_id, vec, adapter)
            index = self._next_index()
            vec_rel = f"{ENTRY_DIR}/{index:06d}.vec"
            adp_rel = f"{ENTRY_DIR}/{index:06d}.adp"
            (self.path / ENTRY_DIR).mkdir(exist_ok=True)
            formats.write_vector(self.path / vec_rel, vec)
            formats.write_adapter(self.path / adp_rel, adapter)
            self._append(entry_id, vec, adapter, metadata, (vec_rel, adp_rel))
            try:
                self._write_index()
            except BaseException:
                self._load()
                raise
        log.info("added entry %r (insertion index %d)", entry_id, index)
        return entry_id

    def _next_index(self) -> int:
        return self._entries[-1].insertion_index + 1 if self._entries else 0

    def _append(self, entry_id, vec, adapter, metadata, files) -> None:
        if self.dim is None:
            self.dim = int(vec.shape[0])
        if self.signature is None:
            self.signature = _signature_of(adapter)
        entry = RegistryEntry(entry_id, vec, self._next_index(), metadata)
        self._by_id[entry_id] = len(self._entries)
        self._entries.append(entry)
        self._adapters[entry_id] = adapter
        if files is not None:
            self._files[entry_id] = files
        self._matrix = None

    # -- retrieval ----------------------------------------------------

    def retrieve(
        self,
        target,
        k: int | None = None,
        exclude: Sequence[str] = (),
    ) -> RetrievalResult:
        """The ``k`` entries nearest to ``target`` by squared l2 distance.

        ``k=None`` returns every non-excluded entry. Ties are broken by
        insertion order.
        """
        target = as_vector(target, "target")
        if self.dim is not None and target.shape[0] != self.dim:
            raise ShapeError(f"target has dim {target.shape[0]}, registry dim is {self.dim}")
        excluded = set(exclude)
        keep = [i for i, e in enumerate(self._entries) if e.id not in excluded]
        if not keep:
            raise DomainError("registry has no entries left after exclusions")
        d2 = squared_distances(self.representations()[keep], target)
        order = argsort_k(d2, k)
        return RetrievalResult(
            ids=tuple(self._entries[keep[i]].id for i in order),
            squared_distances=d2[order],
        )
