"""Pure-Python twin of the compiled kernels in ``_speedups``.

Same function signatures and bit-exact results; selected by ``kernels``
when the extension is unavailable or SETSYNC_PURE is set.  Python ints
carry the 122-bit intermediates that uint64 cannot.
"""

import numpy as np

M61 = (1 << 61) - 1


def mulmod(a, b):
    """(a * b) mod (2^61 - 1)."""
    return (int(a) * int(b)) % M61


def addmod(a, b):
    return (int(a) + int(b)) % M61


def submod(a, b):
    return (int(a) - int(b)) % M61


def hash_words(xs, a, b):
    """Vector pairwise hash ((a*x + b) mod 2^61-1) over a uint64 array."""
    a = int(a)
    b = int(b)
    vals = [(a * int(x) + b) % M61 for x in np.asarray(xs, dtype=np.uint64).tolist()]
    return np.array(vals, dtype=np.uint64)


def iblt_apply(counts, keysums, checks, keys, sign, k, block, ha, hb, ca, cb):
    """Insert (sign=+1) or delete (sign=-1) a batch of keys from cell arrays."""
    ha = [int(v) for v in ha]
    hb = [int(v) for v in hb]
    ca = int(ca)
    cb = int(cb)
    block = int(block)
    for x in np.asarray(keys, dtype=np.uint64).tolist():
        x = int(x)
        chk = (ca * x + cb) % M61
        for j in range(k):
            idx = j * block + (ha[j] * x + hb[j]) % M61 % block
            counts[idx] += sign
            keysums[idx] ^= np.uint64(x)
            checks[idx] ^= np.uint64(chk)


def iblt_peel(counts, keysums, checks, k, block, ha, hb, ca, cb):
    """Run the peeling loop in place; returns (positives, negatives, residual)."""
    ha = [int(v) for v in ha]
    hb = [int(v) for v in hb]
    ca = int(ca)
    cb = int(cb)
    block = int(block)
    m = len(counts)
    pos, neg = [], []
    stack = [i for i in range(m) if counts[i] in (1, -1)]
    extracted = 0
    limit = 8 * m + 64
    while stack:
        i = stack.pop()
        c = int(counts[i])
        if c not in (1, -1):
            continue
        x = int(keysums[i])
        chk = (ca * x + cb) % M61
        if chk != int(checks[i]):
            continue
        (pos if c == 1 else neg).append(x)
        extracted += 1
        if extracted > limit:
            break
        for j in range(k):
            idx = j * block + (ha[j] * x + hb[j]) % M61 % block
            counts[idx] -= c
            keysums[idx] ^= np.uint64(x)
            checks[idx] ^= np.uint64(chk)
            if counts[idx] in (1, -1):
                stack.append(idx)
    residual = int(np.count_nonzero((counts != 0) | (keysums != 0) | (checks != 0)))
    return pos, neg, residual


def bucket_update(counters, keys, a, b, delta):
    """Add delta (mod 4) to each key's bucket in every replica row."""
    nb = counters.shape[1]
    xs = np.asarray(keys, dtype=np.uint64)
    for r in range(counters.shape[0]):
        idx = hash_words(xs, int(a[r]), int(b[r])) % np.uint64(nb)
        # uint8 wraparound is mod 256, which is compatible with mod 4
        np.add.at(counters[r], idx.astype(np.intp), np.uint8(delta))
    counters &= 3


def charpoly_eval(xs, zs):
    """values[i] = prod over x in xs of (z_i - x) mod 2^61-1."""
    elems = [int(x) % M61 for x in np.asarray(xs, dtype=np.uint64).tolist()]
    out = []
    for z in np.asarray(zs, dtype=np.uint64).tolist():
        z = int(z)
        acc = 1
        for x in elems:
            acc = acc * (z - x) % M61
        out.append(acc % M61)
    return np.array(out, dtype=np.uint64)


def poly_eval_many(coeffs, xs):
    """Horner evaluation of a polynomial (LSB-first coeffs) at many points."""
    cs = [int(c) for c in np.asarray(coeffs, dtype=np.uint64).tolist()][::-1]
    out = []
    for z in np.asarray(xs, dtype=np.uint64).tolist():
        z = int(z)
        acc = 0
        for c in cs:
            acc = (acc * z + c) % M61
        out.append(acc)
    return np.array(out, dtype=np.uint64)


def poly_mulmod(a, b, mod):
    """(a * b) mod `mod` over GF(2^61-1); coefficients LSB-first, mod monic."""
    pa = [int(v) for v in np.asarray(a, dtype=np.uint64).tolist()]
    pb = [int(v) for v in np.asarray(b, dtype=np.uint64).tolist()]
    pm = [int(v) for v in np.asarray(mod, dtype=np.uint64).tolist()]
    na, nb, nm = len(pa), len(pb), len(pm)
    prod = [0] * max(na + nb - 1, nm - 1)
    for i, v in enumerate(pa):
        if v == 0:
            continue
        for j, w in enumerate(pb):
            prod[i + j] = (prod[i + j] + v * w) % M61
    for i in range(na + nb - 2, nm - 2, -1):
        lead = prod[i]
        if lead == 0:
            continue
        prod[i] = 0
        for j in range(nm - 1):
            prod[i - nm + 1 + j] = (prod[i - nm + 1 + j] - lead * pm[j]) % M61
    return np.array(prod[: nm - 1], dtype=np.uint64)
