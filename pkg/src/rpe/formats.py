"""Little-endian binary formats for representation vectors and adapters.

``.vec``::

    b"RPEVEC01" | u32 dim | dim * f32

``.adp``::

    b"RPEADP01" | u32 count | count * parameter

    parameter = u16 name_len | name (utf-8) | u8 kind | u8 ndim | dims | payload
      kind 0 (dense):    ndim * u32 shape, then prod(shape) f32
      kind 1 (low-rank): ndim == 2; 2 * u32 up shape, 2 * u32 down shape,
                         u32 rank, then up f32 payload, then down f32 payload

All payloads are row-major. Values are rounded to float32 on write and widened
back to float64 on read.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .adapters import AdapterDelta, BaseParameters, LowRankPair
from .errors import FormatError, ShapeError

VEC_MAGIC = b"RPEVEC01"
ADP_MAGIC = b"RPEADP01"

KIND_DENSE = 0
KIND_LOWRANK = 1

_F32 = np.dtype("<f4")


def to_float32(values) -> np.ndarray:
    """Round to float32, refusing values that overflow to Inf."""
    arr = np.asarray(values, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = arr.astype(_F32)
    if not np.all(np.isfinite(out)):
        raise ValueError("value out of float32 range")
    return out


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temp file in the target directory, fsync, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.buf = memoryview(data)
        self.pos = 0
        self.source = source

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def floats(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype=_F32).astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(
                f"{self.source}: {len(self.buf) - self.pos} trailing bytes"
            )


def encode_vector(values) -> bytes:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeError(f"vector must be 1-D and non-empty, got shape {arr.shape}")
    return VEC_MAGIC + struct.pack("<I", arr.size) + to_float32(arr).tobytes()


def decode_vector(data: bytes, source: str = "<vec>") -> np.ndarray:
    r = _Reader(data, source)
    if bytes(r.take(8)) != VEC_MAGIC:
        raise FormatError(f"{source}: bad magic, expected {VEC_MAGIC!r}")
    (dim,) = r.unpack("<I")
    if dim == 0:
        raise FormatError(f"{source}: zero dimension")
    out = r.floats(dim)
    r.done()
    return out


def write_vector(path, values) -> None:
    atomic_write(path, encode_vector(values))


def read_vector(path) -> np.ndarray:
    return decode_vector(Path(path).read_bytes(), str(path))


def encode_adapter(params) -> bytes:
    """Serialize an :class:`AdapterDelta` or :class:`BaseParameters`."""
    out = io.BytesIO()
    out.write(ADP_MAGIC)
    out.write(struct.pack("<I", len(params)))
    for name, value in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ShapeError(f"parameter name too long: {name[:40]}...")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        if isinstance(value, LowRankPair):
            out.write(struct.pack("<BB", KIND_LOWRANK, 2))
            out.write(struct.pack("<4I", *value.up.shape, *value.down.shape))
            out.write(struct.pack("<I", value.rank))
            out.write(to_float32(value.up).tobytes())
            out.write(to_float32(value.down).tobytes())
        else:
            if value.ndim > 0xFF:
                raise ShapeError(f"parameter {name!r}: too many dimensions")
            out.write(struct.pack("<BB", KIND_DENSE, value.ndim))
            out.write(struct.pack(f"<{value.ndim}I", *value.shape))
            out.write(to_float32(value).tobytes())
    return out.getvalue()


def decode_adapter(data: bytes, source: str = "<adp>") -> AdapterDelta:
    r = _Reader(data, source)
    if bytes(r.take(8)) != ADP_MAGIC:
        raise FormatError(f"{source}: bad magic, expected {ADP_MAGIC!r}")
    (count,) = r.unpack("<I")
    entries = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = bytes(r.take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: parameter name is not UTF-8") from exc
        if name in entries:
            raise FormatError(f"{source}: duplicate parameter {name!r}")
        kind, ndim = r.unpack("<BB")
        if kind == KIND_DENSE:
            shape = r.unpack(f"<{ndim}I")
            if ndim == 0 or 0 in shape:
                raise FormatError(f"{source}: parameter {name!r} has empty shape {shape}")
            entries[name] = r.floats(int(np.prod(shape))).reshape(shape)
        elif kind == KIND_LOWRANK:
            if ndim != 2:
                raise FormatError(f"{source}: low-rank parameter {name!r} has ndim {ndim}")
            m, r_up, r_down, n = r.unpack("<4I")
            (rank,) = r.unpack("<I")
            if not (r_up == r_down == rank) or 0 in (m, n, rank):
                raise FormatError(
                    f"{source}: parameter {name!r} has inconsistent low-rank dims "
                    f"up({m},{r_up}) down({r_down},{n}) rank {rank}"
                )
            up = r.floats(m * rank).reshape(m, rank)
            down = r.floats(rank * n).reshape(rank, n)
            entries[name] = LowRankPair(up=up, down=down)
        else:
            raise FormatError(f"{source}: parameter {name!r} has unknown kind {kind}")
    r.done()
    try:
        return AdapterDelta(entries)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def write_adapter(path, params) -> None:
    atomic_write(path, encode_adapter(params))


def read_adapter(path) -> AdapterDelta:
    return decode_adapter(Path(path).read_bytes(), str(path))


def read_base(path) -> BaseParameters:
    delta = read_adapter(path)
    if not delta.is_dense:
        raise FormatError(f"{path}: base parameter files must be dense")
    return BaseParameters(dict(delta.items()))


def quantize_vector(values) -> np.ndarray:
    """Round through float32, as a ``.vec`` write/read cycle would."""
    return to_float32(values).astype(np.float64)


def quantize_adapter(delta: AdapterDelta) -> AdapterDelta:
    """Round through float32, as an ``.adp`` write/read cycle would."""
    return decode_adapter(encode_adapter(delta))
