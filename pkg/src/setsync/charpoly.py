"""Characteristic-polynomial set reconciliation over GF(2^61 - 1).

Alice sends evaluations of chi_S(z) = prod (z - x) at d+1 seed-derived
points plus her set size.  Bob forms the homogeneous relations
chi_S(z_i) * Q(z_i) - chi_T(z_i) * P(z_i) = 0 with monic P, Q of exact
degrees fixed by d and the size delta, solves by Gaussian elimination,
reduces by the gcd, and reads the differences off the roots:
roots(P) = S \\ T and roots(Q) = T \\ S.  Success is deterministic whenever
|S (+) T| <= d and all elements are below the universe bound.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InterpolationFailure, InvalidParams, MalformedBytes
from .rng import Seed

Q = (1 << 61) - 1
_WIRE_HEAD = struct.Struct("<HQ")


# -- scalar field helpers ---------------------------------------------------

def finv(a: int) -> int:
    if a % Q == 0:
        raise ZeroDivisionError("inverse of zero in GF(2^61-1)")
    return pow(a, Q - 2, Q)


# -- polynomial helpers (LSB-first int lists) -------------------------------

def poly_trim(p):
    while len(p) > 1 and p[-1] == 0:
        p.pop()
    return p


def poly_deg(p) -> int:
    return len(p) - 1


def poly_is_zero(p) -> bool:
    return all(c == 0 for c in p)


def poly_monic(p):
    p = poly_trim(list(p))
    lead = p[-1]
    if lead == 0:
        return p
    if lead == 1:
        return p
    inv = finv(lead)
    return [c * inv % Q for c in p]


def poly_divmod(a, b):
    a = poly_trim(list(a))
    b = poly_trim(list(b))
    if poly_is_zero(b):
        raise ZeroDivisionError("polynomial division by zero")
    if poly_deg(a) < poly_deg(b):
        return [0], a
    inv_lead = finv(b[-1])
    rem = list(a)
    quo = [0] * (poly_deg(a) - poly_deg(b) + 1)
    for i in range(poly_deg(a) - poly_deg(b), -1, -1):
        coef = rem[i + poly_deg(b)] * inv_lead % Q
        if coef:
            quo[i] = coef
            for j, bc in enumerate(b):
                rem[i + j] = (rem[i + j] - coef * bc) % Q
    return poly_trim(quo), poly_trim(rem)


def poly_gcd(a, b):
    a = poly_trim(list(a))
    b = poly_trim(list(b))
    while not poly_is_zero(b):
        _, r = poly_divmod(a, b)
        a, b = b, r
    return poly_monic(a)


def poly_mul(a, b):
    out = [0] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        if x == 0:
            continue
        for j, y in enumerate(b):
            out[i + j] = (out[i + j] + x * y) % Q
    return poly_trim(out)


def poly_from_roots(roots):
    p = [1]
    for r in roots:
        p = poly_mul(p, [(-int(r)) % Q, 1])
    return p


def poly_powmod(base, exponent: int, mod) -> list:
    """base^exponent mod `mod`, with `mod` monic, via the compiled kernel."""
    mod_arr = np.array(poly_monic(mod), dtype=np.uint64)
    result = np.zeros(len(mod_arr) - 1, dtype=np.uint64)
    if len(result) == 0:
        return [0]
    result[0] = 1
    _, rem = poly_divmod(base, list(int(c) for c in mod_arr))
    acc = np.zeros(len(mod_arr) - 1, dtype=np.uint64)
    acc[: len(rem)] = rem
    for bit in bin(exponent)[2:]:
        result = kernels.poly_mulmod(result, result, mod_arr)
        if bit == "1":
            result = kernels.poly_mulmod(result, acc, mod_arr)
    return poly_trim([int(c) for c in result])


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalVector:
    """Evaluations of a characteristic polynomial at seed-derived points."""

    points: np.ndarray
    values: np.ndarray
    set_size: int

    def to_bytes(self) -> bytes:
        # the points are never transmitted; both sides derive them
        return _WIRE_HEAD.pack(len(self.values), self.set_size) + \
            np.asarray(self.values, dtype=np.uint64).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, seed: Seed) -> "EvalVector":
        if len(data) < _WIRE_HEAD.size:
            raise MalformedBytes("truncated eval vector")
        count, set_size = _WIRE_HEAD.unpack_from(data)
        if len(data) != _WIRE_HEAD.size + 8 * count:
            raise MalformedBytes("eval vector length mismatch")
        values = np.frombuffer(data, dtype=np.uint64, offset=_WIRE_HEAD.size).copy()
        return cls(eval_points(seed, count), values, set_size)

    def value_bits(self) -> int:
        return 64 * len(self.values)


def eval_points(seed: Seed, count: int) -> np.ndarray:
    """`count` distinct field elements derived from the session seed."""
    pts = []
    seen = set()
    idx = 0
    while len(pts) < count:
        raw = seed.derive("charpoly-point", idx).material(8)
        idx += 1
        v = int.from_bytes(raw, "little") % Q
        if v not in seen:
            seen.add(v)
            pts.append(v)
    return np.array(pts, dtype=np.uint64)


def evaluate(elements, points) -> EvalVector:
    """chi_S at each point: values[i] = prod (z_i - x); empty set gives ones."""
    xs = np.asarray(sorted(int(x) for x in elements), dtype=np.uint64)
    if xs.size and int(xs.max()) >= Q:
        raise InvalidParams("set elements must be < 2^61 - 1")
    pts = np.asarray(points, dtype=np.uint64)
    return EvalVector(pts, kernels.charpoly_eval(xs, pts), len(xs))


# -- rational interpolation ---------------------------------------------------

def _vec_mod_sub(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x + (np.uint64(Q) - y)) % np.uint64(Q)


def _solve_mod_system(rows: np.ndarray, rhs: np.ndarray) -> list | None:
    """Solve rows * v = rhs over GF(Q); free variables are set to zero.

    Returns None when the system is inconsistent.
    """
    rows = rows.copy()
    rhs = rhs.copy()
    n_rows, n_cols = rows.shape
    pivot_cols = []
    r = 0
    for col in range(n_cols):
        pivot = None
        for i in range(r, n_rows):
            if rows[i, col] != 0:
                pivot = i
                break
        if pivot is None:
            continue
        rows[[r, pivot]] = rows[[pivot, r]]
        rhs[[r, pivot]] = rhs[[pivot, r]]
        inv = finv(int(rows[r, col]))
        rows[r] = kernels.hash_words(rows[r], inv, 0)
        rhs[r] = np.uint64(int(rhs[r]) * inv % Q)
        for i in range(n_rows):
            if i == r:
                continue
            f = int(rows[i, col])
            if f == 0:
                continue
            rows[i] = _vec_mod_sub(rows[i], kernels.hash_words(rows[r], f, 0))
            rhs[i] = np.uint64((int(rhs[i]) - f * int(rhs[r])) % Q)
        pivot_cols.append(col)
        r += 1
        if r == n_rows:
            break
    for i in range(r, n_rows):
        if int(rhs[i]) != 0:
            return None
    sol = [0] * n_cols
    for row_idx, col in enumerate(pivot_cols):
        sol[col] = int(rhs[row_idx])
    return sol


def reconcile(alice: EvalVector, bob_set, d: int, universe: int = Q):
    """Recover (S \\ T, T \\ S) from Alice's evaluations and Bob's set T.

    Raises InterpolationFailure when the difference exceeded d (the failure
    is always detected, never a silent wrong answer, up to the caller's
    whole-set verification).
    """
    if len(alice.values) < d + 1:
        raise InvalidParams("need at least d+1 evaluations")
    bob = evaluate(bob_set, alice.points)
    delta = alice.set_size - bob.set_size
    if abs(delta) > d:
        raise InterpolationFailure("size delta exceeds difference bound")
    dp = (d + delta + 1) // 2
    dq = dp - delta
    n_pts = d + 1
    z = alice.points[:n_pts].astype(np.uint64)
    chi_s = alice.values[:n_pts]
    chi_t = bob.values[:n_pts]

    # powers[i, j] = z_i^j
    max_deg = max(dp, dq)
    powers = np.empty((n_pts, max_deg + 1), dtype=np.uint64)
    powers[:, 0] = 1
    for j in range(1, max_deg + 1):
        powers[:, j] = np.array(
            [kernels.mulmod(int(powers[i, j - 1]), int(z[i])) for i in range(n_pts)],
            dtype=np.uint64)

    rows = np.zeros((n_pts, dp + dq), dtype=np.uint64)
    rhs = np.zeros(n_pts, dtype=np.uint64)
    for i in range(n_pts):
        t_i = int(chi_t[i])
        s_i = int(chi_s[i])
        for j in range(dp):
            rows[i, j] = t_i * int(powers[i, j]) % Q
        for j in range(dq):
            rows[i, dp + j] = (Q - s_i * int(powers[i, j]) % Q) % Q
        rhs[i] = (s_i * int(powers[i, dq]) - t_i * int(powers[i, dp])) % Q

    sol = _solve_mod_system(rows, rhs)
    if sol is None:
        raise InterpolationFailure("interpolation system inconsistent")
    p = poly_trim(sol[:dp] + [1])
    q = poly_trim(sol[dp:] + [1])
    g = poly_gcd(p, q)
    if poly_deg(g) > 0:
        p, _ = poly_divmod(p, g)
        q, _ = poly_divmod(q, g)
    only_alice = find_roots(p, universe)
    only_bob = find_roots(q, universe)
    if only_alice is None or only_bob is None:
        raise InterpolationFailure("difference polynomial does not split in universe")
    bob_lookup = set(int(x) for x in bob_set)
    if not only_bob <= bob_lookup or (only_alice & bob_lookup):
        raise InterpolationFailure("recovered roots inconsistent with local set")
    return only_alice, only_bob


# -- root finding -------------------------------------------------------------

BRUTE_FORCE_UNIVERSE = 1 << 20


def _deterministic_shifts(p):
    h = hashlib.blake2b(bytes(str(tuple(p)), "ascii"), digest_size=32).digest()
    ctr = 0
    while True:
        d = hashlib.blake2b(ctr.to_bytes(8, "little"), key=h, digest_size=8).digest()
        yield int.from_bytes(d, "little") % Q
        ctr += 1


def _split_linear(p, shifts):
    if poly_deg(p) == 0:
        return []
    if poly_deg(p) == 1:
        return [(-p[0]) % Q]
    for _ in range(64):
        r = next(shifts)
        w = poly_powmod([r, 1], (Q - 1) // 2, p)
        w = list(w)
        w[0] = (w[0] - 1) % Q
        g = poly_gcd(p, poly_trim(w))
        if 0 < poly_deg(g) < poly_deg(p):
            rest, rem = poly_divmod(p, g)
            if not poly_is_zero(rem):
                return None
            left = _split_linear(g, shifts)
            right = _split_linear(poly_monic(rest), shifts)
            if left is None or right is None:
                return None
            return left + right
    return None


def find_roots(p, universe: int = Q):
    """All roots of p in [0, universe), each with multiplicity 1, else None.

    Small universes are scanned exhaustively (the trivially correct path);
    larger ones use gcd-based equal-degree splitting.
    """
    p = poly_monic(p)
    if poly_is_zero(p):
        return None
    deg = poly_deg(p)
    if deg == 0:
        return set()
    if universe <= BRUTE_FORCE_UNIVERSE:
        coeffs = np.array(p, dtype=np.uint64)
        roots = set()
        chunk = 1 << 16
        for start in range(0, universe, chunk):
            xs = np.arange(start, min(start + chunk, universe), dtype=np.uint64)
            vals = kernels.poly_eval_many(coeffs, xs)
            roots.update(int(x) for x in xs[vals == 0])
        if len(roots) != deg:
            return None
        return roots
    # the polynomial must be a product of `deg` distinct linear factors
    xq = poly_powmod([0, 1], Q, p)
    xq_minus_x = list(xq) + [0] * max(0, 2 - len(xq))
    xq_minus_x[1] = (xq_minus_x[1] - 1) % Q
    g = poly_gcd(p, poly_trim(xq_minus_x))
    if poly_deg(g) != deg:
        return None
    roots = _split_linear(p, _deterministic_shifts(p))
    if roots is None or len(set(roots)) != deg:
        return None
    out = set(roots)
    if any(r >= universe for r in out):
        return None
    return out
