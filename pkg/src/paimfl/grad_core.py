"""Flat gradient vectors, sparse updates and their wire layouts.

Every update exchanged in the simulator is a single float64 vector of length
``d`` (parameters flattened layer-major, row-major within a layer). On the
wire an update is either

* sparse: ``u32 d, u32 k`` followed by ``k`` records of ``(u32 index, f32 value)``
* dense:  ``u32 d`` followed by ``d`` f32 values

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

SPARSE_HEADER_BYTES = 8
DENSE_HEADER_BYTES = 4
INDEX_WIDTH = 4
VALUE_WIDTH = 4

_SPARSE_RECORD = np.dtype([("index", "<u4"), ("value", "<f4")])


class WireFormatError(ValueError):
    """Raised when a payload does not parse under either wire layout."""


def _check_finite(values: np.ndarray, what: str = "gradient") -> None:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"non-finite {what} entry at index {i}: {values[i]!r}")


@dataclass(frozen=True)
class GradientVector:
    """Dense flat update. ``values`` is copied and made read-only."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        _check_finite(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[0]

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __len__(self):
        return self.d

    def __eq__(self, other):
        if not isinstance(other, GradientVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    __hash__ = None

    @classmethod
    def zeros(cls, d: int) -> "GradientVector":
        return cls(np.zeros(d))


@dataclass(frozen=True)
class SparseUpdate:
    """Wire-form update: strictly increasing ``indices`` into ``[0, d)``."""

    indices: np.ndarray
    entries: np.ndarray
    d: int
    k: int = field(init=False)

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64, copy=True).reshape(-1)
        val = np.array(self.entries, dtype=np.float64, copy=True).reshape(-1)
        d = int(self.d)
        if d < 0:
            raise ValueError(f"dimension must be non-negative, got {d}")
        if idx.shape != val.shape:
            raise ValueError(
                f"indices ({idx.size}) and entries ({val.size}) differ in length")
        if idx.size > d:
            raise ValueError(f"k={idx.size} exceeds d={d}")
        if idx.size:
            if idx.min() < 0 or idx.max() >= d:
                raise ValueError(f"index out of range [0, {d})")
            steps = np.diff(idx)
            if np.any(steps <= 0):
                pos = int(np.flatnonzero(steps <= 0)[0]) + 1
                raise ValueError(
                    f"indices must be strictly increasing (duplicate or "
                    f"unsorted index {int(idx[pos])} at position {pos})")
        _check_finite(val, "sparse")
        idx.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "entries", val)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "k", int(idx.size))

    def __eq__(self, other):
        if not isinstance(other, SparseUpdate):
            return NotImplemented
        return (self.d == other.d and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.entries, other.entries))

    __hash__ = None


def as_array(g) -> np.ndarray:
    """Return the float64 values behind a GradientVector or array-like."""
    if isinstance(g, GradientVector):
        return g.values
    if isinstance(g, SparseUpdate):
        return densify(g).values
    return np.asarray(g, dtype=np.float64).reshape(-1)


def clip_l2(g: GradientVector, c: float) -> GradientVector:
    """Scale ``g`` down to L2 norm ``c`` if it is longer; otherwise return it."""
    if not c > 0:
        raise ValueError(f"clip bound must be positive, got {c}")
    v = as_array(g)
    _check_finite(v)
    norm = float(np.linalg.norm(v))
    if norm <= c:
        return g if isinstance(g, GradientVector) else GradientVector(v)
    scale = c / norm
    out = v * scale
    # float rounding can leave the norm a hair above c; shrink by ulps until
    # it is not, so a second clip is a no-op
    while float(np.linalg.norm(out)) > c:
        scale = np.nextafter(scale, 0.0)
        out = v * scale
    return GradientVector(out)


def sparsify(g: GradientVector) -> SparseUpdate:
    v = as_array(g)
    idx = np.flatnonzero(v)
    return SparseUpdate(idx, v[idx], v.shape[0])


def densify(s: SparseUpdate) -> GradientVector:
    out = np.zeros(s.d)
    out[s.indices] = s.entries
    return GradientVector(out)


# -- wire layouts ------------------------------------------------------------

def sparse_nbytes(k: int) -> int:
    return SPARSE_HEADER_BYTES + k * (INDEX_WIDTH + VALUE_WIDTH)


def dense_nbytes(d: int) -> int:
    return DENSE_HEADER_BYTES + d * VALUE_WIDTH


def encode_sparse(s: SparseUpdate) -> bytes:
    rec = np.empty(s.k, dtype=_SPARSE_RECORD)
    rec["index"] = s.indices
    rec["value"] = s.entries
    return struct.pack("<II", s.d, s.k) + rec.tobytes()


def encode_dense(g) -> bytes:
    v = as_array(g)
    return struct.pack("<I", v.shape[0]) + v.astype("<f4").tobytes()


def decode_sparse(buf: bytes) -> SparseUpdate:
    if len(buf) < SPARSE_HEADER_BYTES:
        raise WireFormatError(f"sparse payload shorter than header: {len(buf)} bytes")
    d, k = struct.unpack_from("<II", buf, 0)
    want = sparse_nbytes(k)
    if len(buf) != want:
        raise WireFormatError(f"sparse payload is {len(buf)} bytes, header implies {want}")
    rec = np.frombuffer(buf, dtype=_SPARSE_RECORD, offset=SPARSE_HEADER_BYTES, count=k)
    return SparseUpdate(rec["index"].astype(np.int64), rec["value"].astype(np.float64), d)


def decode_dense(buf: bytes) -> GradientVector:
    if len(buf) < DENSE_HEADER_BYTES:
        raise WireFormatError(f"dense payload shorter than header: {len(buf)} bytes")
    (d,) = struct.unpack_from("<I", buf, 0)
    if len(buf) != dense_nbytes(d):
        raise WireFormatError(f"dense payload is {len(buf)} bytes, header implies {dense_nbytes(d)}")
    return GradientVector(np.frombuffer(buf, dtype="<f4", offset=DENSE_HEADER_BYTES, count=d))


def encode_update(s: SparseUpdate, dense_downlink: bool = False) -> bytes:
    """Serialize ``s`` with the smaller layout (or dense when forced).

    The sparse layout is used only when strictly shorter than the dense one,
    so a payload of exactly ``4 + 4*d`` bytes is always dense and the two
    layouts can be told apart by length alone.
    """
    if dense_downlink or sparse_nbytes(s.k) >= dense_nbytes(s.d):
        return encode_dense(densify(s))
    return encode_sparse(s)


def decode_update(buf: bytes) -> SparseUpdate:
    if len(buf) < DENSE_HEADER_BYTES:
        raise WireFormatError(f"payload too short: {len(buf)} bytes")
    (d,) = struct.unpack_from("<I", buf, 0)
    if len(buf) == dense_nbytes(d):
        return sparsify(decode_dense(buf))
    return decode_sparse(buf)
