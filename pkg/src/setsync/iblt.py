"""Invertible Bloom Lookup Table with signed counts and subtraction.

Cells hold (count, keySum, checkSum).  The table is partitioned: each of the
k hash functions owns a disjoint block of m/k cells.  Peeling extracts cells
whose count is +/-1 and whose checksum matches, yielding the positive and
negative key sets of a subtracted pair of tables.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DecodeFailed, InvalidParams, MalformedBytes, ShapeMismatch
from .rng import Seed, _pairwise_params

K_HASHES = 4
ALPHA = 1.5
M_MIN = 8
KEY_BITS = 61
_HEADER = struct.Struct("<IIQ")

COMPLETE = "complete"
PARTIAL = "partial"


def cells_for_capacity(d_capacity: int, k: int = K_HASHES) -> int:
    """Cell count for a target key capacity: k * ceil(max(alpha*d, m_min)/k)."""
    if d_capacity < 0:
        raise InvalidParams("capacity must be nonnegative")
    want = max(ALPHA * d_capacity, M_MIN)
    return k * int(-(-want // k))


@dataclass
class DecodeResult:
    positives: set
    negatives: set
    status: str
    residual: int = 0

    @property
    def complete(self) -> bool:
        return self.status == COMPLETE


class Iblt:
    """A fixed-shape IBLT bound to a seed; same seed + capacity => same layout."""

    __slots__ = ("m", "k", "seed", "block", "_ha", "_hb", "_ca", "_cb",
                 "counts", "keysums", "checks")

    def __init__(self, d_capacity: int, seed: Seed, _m: int | None = None):
        self.k = K_HASHES
        self.m = _m if _m is not None else cells_for_capacity(d_capacity)
        if self.m % self.k != 0:
            raise InvalidParams("cell count must be a multiple of k")
        self.seed = seed
        self.block = self.m // self.k
        ha, hb = [], []
        for j in range(self.k):
            a, b = _pairwise_params(seed.derive("iblt-cell", j))
            ha.append(a)
            hb.append(b)
        self._ha = np.array(ha, dtype=np.uint64)
        self._hb = np.array(hb, dtype=np.uint64)
        self._ca, self._cb = _pairwise_params(seed.derive("iblt-check"))
        self.counts = np.zeros(self.m, dtype=np.int64)
        self.keysums = np.zeros(self.m, dtype=np.uint64)
        self.checks = np.zeros(self.m, dtype=np.uint64)

    # -- construction -----------------------------------------------------

    @classmethod
    def new(cls, d_capacity: int, seed: Seed) -> "Iblt":
        return cls(d_capacity, seed)

    def copy(self) -> "Iblt":
        t = Iblt(0, self.seed, _m=self.m)
        t.counts = self.counts.copy()
        t.keysums = self.keysums.copy()
        t.checks = self.checks.copy()
        return t

    # -- updates ----------------------------------------------------------

    def apply(self, key: int, sign: int) -> None:
        self.apply_many([key], sign)

    def apply_many(self, keys, sign: int) -> None:
        if sign not in (1, -1):
            raise InvalidParams("sign must be +1 or -1")
        xs = np.asarray(keys, dtype=np.uint64)
        if xs.size and int(xs.max()) >= (1 << KEY_BITS):
            raise InvalidParams("keys must be < 2^61")
        kernels.iblt_apply(self.counts, self.keysums, self.checks, xs,
                           sign, self.k, self.block, self._ha, self._hb,
                           self._ca, self._cb)

    def insert_set(self, keys) -> None:
        self.apply_many(keys, 1)

    def delete_set(self, keys) -> None:
        self.apply_many(keys, -1)

    # -- combination ------------------------------------------------------

    def _check_shape(self, other: "Iblt") -> None:
        if (self.m, self.k) != (other.m, other.k) or self.seed.value != other.seed.value:
            raise ShapeMismatch("tables differ in m, k, or seed")

    def subtract(self, other: "Iblt") -> "Iblt":
        self._check_shape(other)
        out = Iblt(0, self.seed, _m=self.m)
        out.counts = self.counts - other.counts
        out.keysums = self.keysums ^ other.keysums
        out.checks = self.checks ^ other.checks
        return out

    # -- decoding ---------------------------------------------------------

    def decode(self) -> DecodeResult:
        """Peel on a scratch copy; the table itself is left untouched."""
        counts = self.counts.copy()
        keysums = self.keysums.copy()
        checks = self.checks.copy()
        pos, neg, residual = kernels.iblt_peel(
            counts, keysums, checks, self.k, self.block,
            self._ha, self._hb, self._ca, self._cb)
        status = COMPLETE if residual == 0 else PARTIAL
        return DecodeResult(set(int(x) for x in pos), set(int(x) for x in neg),
                            status, residual)

    def decode_or_raise(self) -> DecodeResult:
        res = self.decode()
        if not res.complete:
            raise DecodeFailed(f"{res.residual} residual cells")
        return res

    def is_empty(self) -> bool:
        return (not self.counts.any()) and (not self.keysums.any()) and (not self.checks.any())

    # -- serialization ----------------------------------------------------

    def serialize(self) -> bytes:
        header = _HEADER.pack(self.m, self.k, self.seed.seed_id())
        cells = np.empty((self.m, 3), dtype=np.uint64)
        cells[:, 0] = self.counts.view(np.uint64)
        cells[:, 1] = self.keysums
        cells[:, 2] = self.checks
        return header + cells.tobytes()

    @classmethod
    def deserialize(cls, data: bytes, seed: Seed) -> "Iblt":
        if len(data) < _HEADER.size:
            raise MalformedBytes("truncated header")
        m, k, seed_id = _HEADER.unpack_from(data)
        if k != K_HASHES or m == 0 or m % k != 0:
            raise MalformedBytes("bad header")
        if seed_id != seed.seed_id():
            raise MalformedBytes("seed id mismatch")
        if len(data) != _HEADER.size + 24 * m:
            raise MalformedBytes("truncated cell data")
        t = cls(0, seed, _m=m)
        cells = np.frombuffer(data, dtype=np.uint64, offset=_HEADER.size).reshape(m, 3)
        t.counts = cells[:, 0].astype(np.uint64).view(np.int64).copy()
        t.keysums = cells[:, 1].copy()
        t.checks = cells[:, 2].copy()
        return t

    def serialized_size(self) -> int:
        return _HEADER.size + 24 * self.m

    def __eq__(self, other) -> bool:
        if not isinstance(other, Iblt):
            return NotImplemented
        return (self.m == other.m and self.k == other.k
                and self.seed.value == other.seed.value
                and bool(np.array_equal(self.counts, other.counts))
                and bool(np.array_equal(self.keysums, other.keysums))
                and bool(np.array_equal(self.checks, other.checks)))

    def __repr__(self) -> str:
        return f"Iblt(m={self.m}, k={self.k}, load={int(np.abs(self.counts).sum()) // self.k})"


def encode_set(keys, d_capacity: int, seed: Seed) -> Iblt:
    """Build a table of the given capacity holding every key in `keys`."""
    t = Iblt(d_capacity, seed)
    t.insert_set(np.fromiter(keys, dtype=np.uint64, count=-1) if not isinstance(keys, np.ndarray) else keys)
    return t
