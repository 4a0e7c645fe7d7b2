"""Seeded randomness and hash families.

Both parties in a session share one 256-bit root seed (the public-coins
assumption); every hash function anywhere in the toolkit is derived from it
by a labeled path, so transcripts are reproducible from the root value alone.

The pairwise-independent family is (a*x + b) mod q over the Mersenne prime
q = 2^61 - 1, truncated to the requested output width.  Byte-sequence inputs
are first compressed to a word by a seeded 64-bit BLAKE2 fingerprint.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidParams

M61 = (1 << 61) - 1
SEED_BYTES = 32


@dataclass(frozen=True)
class Seed:
    """A 256-bit seed value plus the derivation path that produced it."""

    value: bytes
    path: tuple = ()

    def __post_init__(self):
        if len(self.value) != SEED_BYTES:
            raise InvalidParams(f"seed must be {SEED_BYTES} bytes, got {len(self.value)}")

    @classmethod
    def from_hex(cls, hexstr: str) -> "Seed":
        hexstr = hexstr.strip()
        if len(hexstr) != 2 * SEED_BYTES:
            raise InvalidParams("seed must be 64 hex characters")
        return cls(bytes.fromhex(hexstr))

    @classmethod
    def from_int(cls, n: int) -> "Seed":
        return cls(n.to_bytes(SEED_BYTES, "little"))

    def hex(self) -> str:
        return self.value.hex()

    def derive(self, label: str, index: int = 0) -> "Seed":
        """Deterministic child seed for (label, index)."""
        if not label:
            raise InvalidParams("derivation label must be nonempty")
        msg = label.encode() + b"\x00" + int(index).to_bytes(8, "little")
        child = hashlib.blake2b(msg, key=self.value, digest_size=SEED_BYTES).digest()
        return Seed(child, self.path + ((label, index),))

    def seed_id(self) -> int:
        """64-bit identifier used in serialized headers."""
        return int.from_bytes(
            hashlib.blake2b(b"id", key=self.value, digest_size=8).digest(), "little"
        )

    def material(self, n: int) -> bytes:
        """n bytes of deterministic expansion of this seed."""
        out = bytearray()
        ctr = 0
        while len(out) < n:
            out += hashlib.blake2b(
                ctr.to_bytes(8, "little"), key=self.value, digest_size=64
            ).digest()
            ctr += 1
        return bytes(out[:n])

    def numpy_rng(self) -> np.random.Generator:
        """Generator for instance sampling (not used by any protocol hash)."""
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(int.from_bytes(self.value, "little")))
        )


def derive(seed: Seed, label: str, index: int = 0) -> Seed:
    return seed.derive(label, index)


def fingerprint64(seed: Seed, data: bytes) -> int:
    """Seeded 64-bit fingerprint of a byte sequence."""
    return int.from_bytes(
        hashlib.blake2b(data, key=seed.value, digest_size=8).digest(), "little"
    )


def _pairwise_params(seed: Seed) -> tuple[int, int]:
    m = seed.material(32)
    a = int.from_bytes(m[:16], "little") % (M61 - 1) + 1
    b = int.from_bytes(m[16:], "little") % M61
    return a, b


@dataclass(frozen=True)
class HashFn:
    """A member of the pairwise-independent family (a*x + b) mod 2^61-1.

    kind is one of "pairwise", "checksum", "bucket"; it only records intent,
    the arithmetic is shared.  Word inputs must be < 2^64; byte inputs are
    fingerprinted down to a word first.
    """

    kind: str
    seed: Seed
    out_bits: int = 61
    a: int = field(default=0)
    b: int = field(default=0)

    def __post_init__(self):
        if self.out_bits < 1 or self.out_bits > 64:
            raise InvalidParams("output bits must be in [1, 64]")
        if self.a == 0:
            a, b = _pairwise_params(self.seed)
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)

    def _mask(self) -> int:
        return (1 << self.out_bits) - 1 if self.out_bits < 61 else (1 << 64) - 1

    def __call__(self, x) -> int:
        if isinstance(x, (bytes, bytearray, memoryview)):
            x = fingerprint64(self.seed, bytes(x))
        v = (self.a * int(x) + self.b) % M61
        return v & self._mask()

    def many(self, xs) -> np.ndarray:
        """Vectorized hash over an array of words."""
        out = kernels.hash_words(np.asarray(xs, dtype=np.uint64), self.a, self.b)
        if self.out_bits < 61:
            out = out & np.uint64(self._mask())
        return out

    def bucket(self, x, m: int) -> int:
        return self(x) % m

    def buckets(self, xs, m: int) -> np.ndarray:
        return self.many(xs) % np.uint64(m)


def pairwise_fn(seed: Seed, label: str, index: int = 0, out_bits: int = 61) -> HashFn:
    return HashFn("pairwise", seed.derive(label, index), out_bits)


def checksum_fn(seed: Seed, label: str = "checksum") -> HashFn:
    return HashFn("checksum", seed.derive(label), 61)


def bucket_fn(seed: Seed, label: str, index: int = 0) -> HashFn:
    return HashFn("bucket", seed.derive(label, index), 61)


def hash_value(fn: HashFn, x) -> int:
    return fn(x)


def read_seed_file(path) -> Seed:
    with open(path, "r", encoding="ascii") as f:
        return Seed.from_hex(f.read())


def write_seed_file(path, seed: Seed) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(seed.hex() + "\n")
