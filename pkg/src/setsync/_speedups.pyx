# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: Mersenne-61 field ops, IBLT cell updates and peeling,
mod-4 sketch bucket updates, and characteristic-polynomial evaluation.

A pure-Python twin of this module lives in ``_fallback``; ``kernels``
selects one at import time.  Keep the two APIs identical.
"""

import numpy as np

cimport numpy as cnp

ctypedef unsigned long long u64
ctypedef long long i64

cdef extern from *:
    ctypedef unsigned long long u128 "unsigned __int128"

cdef u64 M61 = (<u64>1 << 61) - 1


cdef inline u64 _reduce(u128 x) nogil:
    # x < 2^123; two folds plus one conditional subtract land in [0, M61)
    cdef u64 r = <u64>((x >> 61) + (x & M61))
    r = (r >> 61) + (r & M61)
    if r >= M61:
        r -= M61
    return r


cdef inline u64 _mulmod(u64 a, u64 b) nogil:
    return _reduce(<u128>a * b)


cdef inline u64 _affine(u64 a, u64 b, u64 x) nogil:
    return _reduce(<u128>a * x + b)


def mulmod(a, b):
    """(a * b) mod (2^61 - 1)."""
    return _mulmod(<u64>a, <u64>b)


def addmod(a, b):
    cdef u64 s = (<u64>a) + (<u64>b)
    if s >= M61:
        s -= M61
    return s


def submod(a, b):
    cdef u64 x = <u64>a, y = <u64>b
    if x >= y:
        return x - y
    return x + M61 - y


def hash_words(xs, a, b):
    """Vector pairwise hash ((a*x + b) mod 2^61-1) over a uint64 array."""
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] arr = np.ascontiguousarray(xs, dtype=np.uint64)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] out = np.empty(arr.shape[0], dtype=np.uint64)
    cdef u64 ca = <u64>a, cb = <u64>b
    cdef Py_ssize_t i, n = arr.shape[0]
    with nogil:
        for i in range(n):
            out[i] = _affine(ca, cb, arr[i])
    return out


def iblt_apply(cnp.ndarray[cnp.int64_t, ndim=1] counts not None,
               cnp.ndarray[cnp.uint64_t, ndim=1] keysums not None,
               cnp.ndarray[cnp.uint64_t, ndim=1] checks not None,
               keys, int sign, int k, i64 block,
               cnp.ndarray[cnp.uint64_t, ndim=1] ha not None,
               cnp.ndarray[cnp.uint64_t, ndim=1] hb not None,
               u64 ca, u64 cb):
    """Insert (sign=+1) or delete (sign=-1) a batch of keys from cell arrays."""
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] xs = np.ascontiguousarray(keys, dtype=np.uint64)
    cdef Py_ssize_t i, n = xs.shape[0]
    cdef int j
    cdef u64 x, chk
    cdef i64 idx
    with nogil:
        for i in range(n):
            x = xs[i]
            chk = _affine(ca, cb, x)
            for j in range(k):
                idx = j * block + <i64>(_affine(ha[j], hb[j], x) % <u64>block)
                counts[idx] += sign
                keysums[idx] ^= x
                checks[idx] ^= chk


def iblt_peel(cnp.ndarray[cnp.int64_t, ndim=1] counts not None,
              cnp.ndarray[cnp.uint64_t, ndim=1] keysums not None,
              cnp.ndarray[cnp.uint64_t, ndim=1] checks not None,
              int k, i64 block,
              cnp.ndarray[cnp.uint64_t, ndim=1] ha not None,
              cnp.ndarray[cnp.uint64_t, ndim=1] hb not None,
              u64 ca, u64 cb):
    """Run the peeling loop in place.

    Returns (positives, negatives, residual) where residual is the number of
    cells still holding content after no peelable cell remains.
    """
    cdef Py_ssize_t m = counts.shape[0]
    cdef Py_ssize_t cap = 4 * m + 64
    cdef cnp.ndarray[cnp.int64_t, ndim=1] stack = np.empty(cap, dtype=np.int64)
    cdef Py_ssize_t top = 0
    cdef Py_ssize_t i
    cdef i64 c, idx
    cdef int j, sign
    cdef bint overflow = 0
    cdef u64 x, chk
    cdef long extracted = 0, limit = 8 * m + 64
    pos = []
    neg = []
    for i in range(m):
        c = counts[i]
        if c == 1 or c == -1:
            stack[top] = i
            top += 1
    while True:
        if top == 0:
            if not overflow:
                break
            # a push was dropped; rescan for peelable cells
            overflow = 0
            for i in range(m):
                c = counts[i]
                if (c == 1 or c == -1) and top < cap:
                    stack[top] = i
                    top += 1
            if top == 0:
                break
        top -= 1
        i = stack[top]
        c = counts[i]
        if c != 1 and c != -1:
            continue
        x = keysums[i]
        chk = _affine(ca, cb, x)
        if chk != checks[i]:
            continue
        sign = <int>c
        if sign == 1:
            pos.append(x)
        else:
            neg.append(x)
        extracted += 1
        if extracted > limit:
            break
        for j in range(k):
            idx = j * block + <i64>(_affine(ha[j], hb[j], x) % <u64>block)
            counts[idx] -= sign
            keysums[idx] ^= x
            checks[idx] ^= chk
            c = counts[idx]
            if c == 1 or c == -1:
                if top < cap:
                    stack[top] = idx
                    top += 1
                else:
                    overflow = 1
    cdef Py_ssize_t residual = 0
    for i in range(m):
        if counts[i] != 0 or keysums[i] != 0 or checks[i] != 0:
            residual += 1
    return pos, neg, residual


def bucket_update(cnp.ndarray[cnp.uint8_t, ndim=2] counters not None,
                  keys,
                  cnp.ndarray[cnp.uint64_t, ndim=1] a not None,
                  cnp.ndarray[cnp.uint64_t, ndim=1] b not None,
                  int delta):
    """Add delta (mod 4) to each key's bucket in every replica row."""
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] xs = np.ascontiguousarray(keys, dtype=np.uint64)
    cdef Py_ssize_t i, n = xs.shape[0]
    cdef Py_ssize_t r, nrep = counters.shape[0]
    cdef u64 nb = <u64>counters.shape[1]
    cdef u64 x
    cdef Py_ssize_t idx
    with nogil:
        for i in range(n):
            x = xs[i]
            for r in range(nrep):
                idx = <Py_ssize_t>(_affine(a[r], b[r], x) % nb)
                counters[r, idx] = (counters[r, idx] + delta) & 3


def charpoly_eval(xs, zs):
    """values[i] = prod over x in xs of (z_i - x) mod 2^61-1."""
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] ex = np.ascontiguousarray(xs, dtype=np.uint64)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] pz = np.ascontiguousarray(zs, dtype=np.uint64)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] out = np.empty(pz.shape[0], dtype=np.uint64)
    cdef Py_ssize_t i, t, n = ex.shape[0], npts = pz.shape[0]
    cdef u64 acc, z, xm, term
    with nogil:
        for t in range(npts):
            z = pz[t]
            acc = 1
            for i in range(n):
                xm = ex[i]
                if xm >= M61:
                    xm -= M61
                if z >= xm:
                    term = z - xm
                else:
                    term = z + M61 - xm
                acc = _mulmod(acc, term)
            out[t] = acc
    return out


def poly_eval_many(coeffs, xs):
    """Horner evaluation of a polynomial (LSB-first coeffs) at many points."""
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] cs = np.ascontiguousarray(coeffs, dtype=np.uint64)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] pz = np.ascontiguousarray(xs, dtype=np.uint64)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] out = np.empty(pz.shape[0], dtype=np.uint64)
    cdef Py_ssize_t i, t, d = cs.shape[0], npts = pz.shape[0]
    cdef u64 acc, z
    with nogil:
        for t in range(npts):
            z = pz[t]
            acc = 0
            for i in range(d - 1, -1, -1):
                acc = _reduce(<u128>acc * z + cs[i])
            out[t] = acc
    return out


def poly_mulmod(a, b, mod):
    """(a * b) mod `mod` over GF(2^61-1); coefficients LSB-first, mod monic."""
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] pa = np.ascontiguousarray(a, dtype=np.uint64)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] pb = np.ascontiguousarray(b, dtype=np.uint64)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] pm = np.ascontiguousarray(mod, dtype=np.uint64)
    cdef Py_ssize_t na = pa.shape[0], nb = pb.shape[0], nm = pm.shape[0]
    cdef Py_ssize_t size = na + nb - 1
    if size < nm - 1:
        size = nm - 1
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] prod = np.zeros(size, dtype=np.uint64)
    cdef Py_ssize_t i, j
    cdef u64 v, lead
    with nogil:
        for i in range(na):
            v = pa[i]
            if v == 0:
                continue
            for j in range(nb):
                prod[i + j] = (prod[i + j] + _mulmod(v, pb[j]))
                if prod[i + j] >= M61:
                    prod[i + j] -= M61
        # synthetic division by the monic modulus
        for i in range(na + nb - 2, nm - 2, -1):
            lead = prod[i]
            if lead == 0:
                continue
            prod[i] = 0
            for j in range(nm - 1):
                v = _mulmod(lead, pm[j])
                if prod[i - nm + 1 + j] >= v:
                    prod[i - nm + 1 + j] -= v
                else:
                    prod[i - nm + 1 + j] += M61 - v
    return prod[: nm - 1].copy()
