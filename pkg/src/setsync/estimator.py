"""Leveled l0 set-difference estimator.

A DiffSketch holds 64 subsampled small-count sketches plus a level-0 sketch
that sees every update.  An element lands in the level given by the least
significant set bit of its level hash (probability 2^-i), so level i sees
about diff/2^i of the difference.  Each level is a bank of R replicas of B
2-bit mod-4 counters; a level "reports" the maximum nonzero-bucket count over
its replicas.  The query returns 2^(i*) for the largest level i* reporting
more than 8, falling back to the exact level-0 count when no level does.

Counters are stored one byte each in memory and packed four per byte on the
wire; levels that were never touched are neither allocated nor serialized.
"""

from __future__ import annotations

import struct

import numpy as np

from . import kernels
from .errors import InvalidParams, MalformedBytes, ShapeMismatch
from .rng import Seed, _pairwise_params

SUBROUTINE_CAP = 141        # exact-count promise per level
REPLICAS = 4                # ceil(log2(1/eta)) with eta = 1/16
LEVELS = 64
GAMMA = 8                   # median-replication constant
REPORT_THRESHOLD = 8
DEBIAS = 8                  # 2^(i*) concentrates near diff/8

_HEADER = struct.Struct("<QIIB")


def replication_count(delta: float) -> int:
    """Number of parallel runs whose median meets failure probability delta."""
    if not 0 < delta < 1:
        raise InvalidParams("delta must be in (0, 1)")
    r = max(1, int(np.ceil(GAMMA * np.log(1.0 / (2.0 * delta)))))
    return r | 1


class DiffSketch:
    """Mergeable sketch of the size of a set difference."""

    def __init__(self, seed: Seed, c: int = SUBROUTINE_CAP,
                 replicas: int = REPLICAS, levels: int = LEVELS):
        self.seed = seed
        self.c = c
        self.buckets = 2 * c * c
        self.replicas = replicas
        self.levels = levels
        self._level_a = {}
        self._level_b = {}
        self._counters = {}          # level -> uint8[replicas, buckets]
        la, lb = _pairwise_params(seed.derive("sketch-level"))
        self._assign_a = la
        self._assign_b = lb

    # -- internals ---------------------------------------------------------

    def _params_for(self, level: int):
        if level not in self._level_a:
            a = np.empty(self.replicas, dtype=np.uint64)
            b = np.empty(self.replicas, dtype=np.uint64)
            base = self.seed.derive("sketch-buckets", level)
            for r in range(self.replicas):
                a[r], b[r] = _pairwise_params(base.derive("replica", r))
            self._level_a[level] = a
            self._level_b[level] = b
        return self._level_a[level], self._level_b[level]

    def _bank(self, level: int) -> np.ndarray:
        bank = self._counters.get(level)
        if bank is None:
            bank = np.zeros((self.replicas, self.buckets), dtype=np.uint8)
            self._counters[level] = bank
        return bank

    def _assign_levels(self, xs: np.ndarray) -> np.ndarray:
        h = kernels.hash_words(xs, self._assign_a, self._assign_b)
        low = h & (~h + np.uint64(1))
        lv = np.zeros(len(h), dtype=np.int64)
        nz = low != 0
        lv[nz] = np.log2(low[nz].astype(np.float64)).astype(np.int64) + 1
        lv[~nz] = self.levels
        np.minimum(lv, self.levels, out=lv)
        return lv

    # -- updates -----------------------------------------------------------

    def update(self, x: int, side: int) -> None:
        self.update_many([x], side)

    def update_many(self, keys, side: int) -> None:
        if side not in (1, 2):
            raise InvalidParams("side must be 1 or 2")
        xs = np.asarray(list(keys) if not isinstance(keys, np.ndarray) else keys,
                        dtype=np.uint64)
        if xs.size == 0:
            return
        delta = 1 if side == 1 else 3
        a0, b0 = self._params_for(0)
        kernels.bucket_update(self._bank(0), xs, a0, b0, delta)
        lv = self._assign_levels(xs)
        for level in np.unique(lv):
            level = int(level)
            sub = xs[lv == level]
            a, b = self._params_for(level)
            kernels.bucket_update(self._bank(level), sub, a, b, delta)

    # -- combination ---------------------------------------------------------

    def _check_shape(self, other: "DiffSketch") -> None:
        if (self.buckets, self.replicas, self.levels) != \
           (other.buckets, other.replicas, other.levels) or \
           self.seed.value != other.seed.value:
            raise ShapeMismatch("sketches differ in seed or shape")

    def merge(self, other: "DiffSketch") -> "DiffSketch":
        """Cellwise mod-4 sum; equals the sketch of the concatenated streams."""
        self._check_shape(other)
        out = DiffSketch(self.seed, self.c, self.replicas, self.levels)
        for level in set(self._counters) | set(other._counters):
            x = self._counters.get(level)
            y = other._counters.get(level)
            if x is None:
                out._counters[level] = y.copy()
            elif y is None:
                out._counters[level] = x.copy()
            else:
                out._counters[level] = (x + y) & 3
        return out

    # -- queries -------------------------------------------------------------

    def _report(self, level: int) -> int:
        bank = self._counters.get(level)
        if bank is None:
            return 0
        return int((bank != 0).sum(axis=1).max())

    def query(self) -> int:
        """2^(i*) for the largest level reporting > 8, else the exact level-0
        count.  The indicator word packs one bit per level so the top level
        falls out of a single bit-scan."""
        indicator = 0
        for level in self._counters:
            if level == 0:
                continue
            if self._report(level) > REPORT_THRESHOLD:
                indicator |= 1 << level
        if indicator:
            return 1 << (indicator.bit_length() - 1)
        return self._report(0)

    def query_debiased(self) -> int:
        """Query with the subsampling bias of the leveled path removed.

        The leveled rule concentrates near diff/8; protocol capacity
        planning wants an estimate centered on the true difference, so the
        leveled value is scaled by 8.  The exact level-0 path is untouched.
        """
        indicator = 0
        for level in self._counters:
            if level == 0:
                continue
            if self._report(level) > REPORT_THRESHOLD:
                indicator |= 1 << level
        if indicator:
            return DEBIAS << (indicator.bit_length() - 1)
        return self._report(0)

    # -- serialization ---------------------------------------------------------

    def serialize(self) -> bytes:
        present = sorted(l for l, bank in self._counters.items() if bank.any())
        head = _HEADER.pack(self.seed.seed_id(), self.buckets, self.replicas,
                            len(present))
        parts = [head]
        for level in present:
            flat = self._counters[level].reshape(-1)
            pad = (-len(flat)) % 4
            if pad:
                flat = np.concatenate([flat, np.zeros(pad, dtype=np.uint8)])
            quads = flat.reshape(-1, 4)
            packed = (quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4)
                      | (quads[:, 3] << 6)).astype(np.uint8)
            parts.append(struct.pack("<B", level))
            parts.append(packed.tobytes())
        return b"".join(parts)

    @classmethod
    def deserialize(cls, data: bytes, seed: Seed, c: int = SUBROUTINE_CAP) -> "DiffSketch":
        if len(data) < _HEADER.size:
            raise MalformedBytes("truncated sketch header")
        seed_id, buckets, replicas, n_present = _HEADER.unpack_from(data)
        if seed_id != seed.seed_id():
            raise MalformedBytes("seed id mismatch")
        if buckets != 2 * c * c:
            raise MalformedBytes("bucket count does not match subroutine capacity")
        sk = cls(seed, c, replicas)
        per_level = (replicas * buckets + 3) // 4
        off = _HEADER.size
        for _ in range(n_present):
            if off + 1 + per_level > len(data):
                raise MalformedBytes("truncated sketch level")
            level = data[off]
            off += 1
            packed = np.frombuffer(data, dtype=np.uint8, count=per_level, offset=off)
            off += per_level
            flat = np.empty(per_level * 4, dtype=np.uint8)
            flat[0::4] = packed & 3
            flat[1::4] = (packed >> 2) & 3
            flat[2::4] = (packed >> 4) & 3
            flat[3::4] = (packed >> 6) & 3
            sk._counters[int(level)] = flat[: replicas * buckets].reshape(
                replicas, buckets).copy()
        if off != len(data):
            raise MalformedBytes("trailing bytes after sketch levels")
        return sk

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiffSketch):
            return NotImplemented
        if (self.buckets, self.replicas, self.seed.value) != \
           (other.buckets, other.replicas, other.seed.value):
            return False
        levels = set(self._counters) | set(other._counters)
        for level in levels:
            x = self._counters.get(level)
            y = other._counters.get(level)
            if x is None:
                if y.any():
                    return False
            elif y is None:
                if x.any():
                    return False
            elif not np.array_equal(x, y):
                return False
        return True


def sketch_of(keys, side: int, seed: Seed, c: int = SUBROUTINE_CAP) -> DiffSketch:
    sk = DiffSketch(seed, c)
    sk.update_many(keys, side)
    return sk


def estimate_difference(set1, set2, seed: Seed, c: int = SUBROUTINE_CAP,
                        debias: bool = False) -> int:
    """Single-run estimate of |set1 (+) set2| via one merged sketch pair."""
    a = sketch_of(set1, 1, seed, c)
    b = sketch_of(set2, 2, seed, c)
    merged = a.merge(b)
    return merged.query_debiased() if debias else merged.query()


def estimate_with_confidence(set1, set2, delta: float, seed: Seed,
                             c: int = SUBROUTINE_CAP, debias: bool = False) -> int:
    """Median of independent runs; failure probability decays to delta."""
    runs = replication_count(delta)
    vals = []
    for i in range(runs):
        vals.append(estimate_difference(set1, set2, seed.derive("est-run", i),
                                        c, debias))
    vals.sort()
    return vals[len(vals) // 2]
