"""Set-of-sets reconciliation: naive, IBLT-of-IBLTs, cascading, multi-round.

Parent tables never hold variable-length child encodings directly: each
encoding is summarized by a 41-bit fingerprint (pair-encoded with its
multiplicity, so duplicate children are ordinary multiset entries) and the
parties swap full encoding bytes for exactly the fingerprints that decoded
out of the parent.  Those exchanges ride on round label 0x1B and are tallied
apart from the protocol's nominal rounds.

Decode conventions: for tables built as (Alice - Bob), decode positives are
Alice-only words and negatives Bob-only, so Bob reaches Alice's multiset via
(mine - negatives) | positives and Alice reaches Bob's with the arguments
swapped.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .charpoly import EvalVector, eval_points, evaluate, reconcile
from .errors import (DecodeFailed, GiveUp, InterpolationFailure, InvalidParams,
                     NoMatchFound, OracleScaleExceeded, ResidualChildren,
                     VerifyMismatch)
from .estimator import GAMMA, DiffSketch, sketch_of
from .iblt import Iblt
from .rng import Seed, fingerprint64, pairwise_fn
from .setrecon import (WIRE_SKETCH_CAP, apply_diff, capacity_from_estimate,
                       encode_multiset, decode_multiset, multiset_of,
                       pull_iblt, push_iblt)
from .transport import (CHILD_EVALS, CHILD_IBLT, CONTROL, ENC_REQUEST,
                        ENC_RESPONSE, ESTIMATOR, EST_LIST, HASH_IBLT,
                        PARENT_IBLT, ROUND_1B, VERIFY, PeerDisconnected,
                        register_protocol, run_session)

FP_BITS = 41
FP_MASK = (1 << FP_BITS) - 1
CHILD_HASH_BITS = 32
CHILD_HASH_MASK = (1 << CHILD_HASH_BITS) - 1
STAR_LEVEL = 255

# cascade parent provisioning: level 1 sees both sides' differing encodings,
# deeper levels only Alice's not-yet-recovered ones (< (9/4) d / 2^i of them)
CASCADE_L1_FACTOR = 2.5
CASCADE_FACTOR = 2.25
CASCADE_SLACK = 4

EVALS_SLACK = 1  # extra evaluation beyond d_i + 1 absorbs rare estimator undercounts

# per-child tables in the multi-round protocol: tiny tables peel poorly
# (block size m/k shrinks), so pad the capacity and always ship >= 2 replicas
MR_CHILD_CAP_SLACK = 8
MR_CHILD_MIN_REPLICAS = 2


# -- parent sets ----------------------------------------------------------------

def canon_child(child) -> bytes:
    xs = np.asarray(sorted(int(x) for x in child), dtype=np.uint64)
    return struct.pack("<I", len(xs)) + xs.tobytes()


def child_from_canon(data: bytes) -> frozenset:
    (count,) = struct.unpack_from("<I", data)
    xs = np.frombuffer(data, dtype=np.uint64, offset=4, count=count)
    return frozenset(int(x) for x in xs)


class SetOfSets:
    """A parent multiset of child sets (duplicate children allowed)."""

    def __init__(self, children):
        self.children = [frozenset(int(x) for x in c) for c in children]

    @property
    def s(self) -> int:
        return len(self.children)

    @property
    def n(self) -> int:
        return sum(len(c) for c in self.children)

    def canon_multiset(self) -> dict[bytes, int]:
        return multiset_of(canon_child(c) for c in self.children)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SetOfSets):
            return NotImplemented
        return self.canon_multiset() == other.canon_multiset()

    def __repr__(self) -> str:
        return f"SetOfSets(s={self.s}, n={self.n})"


@dataclass
class ProblemParams:
    s: int
    h: int
    u: int
    d: int | None = None
    d_hat: int | None = None
    delta: float = 0.1
    w: int = 64
    verify: bool = True
    est_cap: int = WIRE_SKETCH_CAP
    n: int | None = None

    def __post_init__(self):
        if self.d is not None and self.d_hat is None:
            self.d_hat = min(self.d, self.s)
        if self.d_hat is not None and self.d is not None:
            if self.d_hat > min(self.d, self.s):
                raise InvalidParams("d_hat must be <= min(d, s)")


def sos_verify_hash(seed: Seed, sos: SetOfSets) -> int:
    vseed = seed.derive("sos-verify")
    total = 0
    for child in sos.children:
        total = (total + fingerprint64(vseed, canon_child(child))) & ((1 << 64) - 1)
    return total


def _fp(seed: Seed, data: bytes) -> int:
    return fingerprint64(seed, data) & FP_MASK


# -- child encodings --------------------------------------------------------------

@dataclass
class ChildEncoding:
    """(child IBLT, child-set hash) pair plus its parent-table fingerprint."""

    iblt_bytes: bytes
    child_hash: int
    fingerprint: int = field(default=0)

    def to_bytes(self) -> bytes:
        return struct.pack("<I", self.child_hash) + self.iblt_bytes

    @classmethod
    def from_bytes(cls, data: bytes, fp_seed: Seed) -> "ChildEncoding":
        (child_hash,) = struct.unpack_from("<I", data)
        enc = cls(data[4:], child_hash)
        enc.fingerprint = _fp(fp_seed, enc.to_bytes())
        return enc


def encode_child(child, capacity: int, enc_seed: Seed, hash_fn,
                 fp_seed: Seed) -> ChildEncoding:
    t = Iblt(capacity, enc_seed)
    t.insert_set(np.asarray(sorted(child), dtype=np.uint64))
    child_hash = hash_fn(canon_child(child)) & CHILD_HASH_MASK
    enc = ChildEncoding(t.serialize(), child_hash)
    enc.fingerprint = _fp(fp_seed, enc.to_bytes())
    return enc


def _decode_pair(alice_enc: ChildEncoding, bob_child, enc_seed: Seed,
                 hash_fn) -> frozenset | None:
    """Try to recover Alice's child from her encoding and one of Bob's children."""
    t_a = Iblt.deserialize(alice_enc.iblt_bytes, enc_seed)
    t_b = Iblt(0, enc_seed, _m=t_a.m)
    t_b.insert_set(np.asarray(sorted(bob_child), dtype=np.uint64))
    res = t_a.subtract(t_b).decode()
    if not res.complete:
        return None
    candidate = frozenset(apply_diff(set(bob_child), res.positives, res.negatives))
    if hash_fn(canon_child(candidate)) & CHILD_HASH_MASK != alice_enc.child_hash:
        return None
    return candidate


# -- encoding exchange (fingerprint indirection) -----------------------------------

def _pack_fps(kind: int, fps) -> bytes:
    fps = sorted(int(f) for f in fps)
    return struct.pack("<BI", kind, len(fps)) + b"".join(
        struct.pack("<Q", f) for f in fps)


def _unpack_fps(data: bytes):
    kind, count = struct.unpack_from("<BI", data)
    fps = [struct.unpack_from("<Q", data, 5 + 8 * i)[0] for i in range(count)]
    return kind, fps


def _pack_blobs(items) -> bytes:
    parts = [struct.pack("<I", len(items))]
    for fp, blob in items:
        parts.append(struct.pack("<QI", fp, len(blob)))
        parts.append(blob)
    return b"".join(parts)


def _unpack_blobs(data: bytes) -> dict[int, bytes]:
    (count,) = struct.unpack_from("<I", data)
    off = 4
    out = {}
    for _ in range(count):
        fp, ln = struct.unpack_from("<QI", data, off)
        off += 12
        out[fp] = data[off:off + ln]
        off += ln
    return out


def _fetch_encodings(ep, kind: int, fps) -> dict[int, bytes]:
    """Bob-side: one request/response pair on the 0x1B label (sent even when
    empty so both backends see the same frame sequence)."""
    ep.send(ENC_REQUEST, _pack_fps(kind, fps), ROUND_1B)
    frame = ep.recv(ENC_RESPONSE)
    return _unpack_blobs(frame.payload)


def _serve_encodings(ep, store: dict, extra_handlers=None) -> None:
    """Alice-side: answer encoding requests until the peer finishes."""
    while True:
        try:
            frame = ep.recv((ENC_REQUEST, CONTROL))
        except PeerDisconnected:
            return
        if frame.msg_type == CONTROL:
            if extra_handlers and frame.payload in extra_handlers:
                if extra_handlers[frame.payload]():
                    continue
            return
        kind, fps = _unpack_fps(frame.payload)
        items = [(fp, store[(kind, fp)]) for fp in fps if (kind, fp) in store]
        ep.send(ENC_RESPONSE, _pack_blobs(items), ROUND_1B)


# -- instance generation -------------------------------------------------------------

def spread_dyadic(d: int) -> list[int]:
    """Per-child difference sizes [d/2, d/4, ..., 1(, 1)] summing to d."""
    parts = []
    r = d
    while r > 0:
        p = 1 << max(r.bit_length() - 2, 0)
        parts.append(p)
        r -= p
    return parts


def spread_uniform(d: int, k: int) -> list[int]:
    if d % k:
        raise InvalidParams("uniform spread requires k | d")
    return [d // k] * k


def assert_spread_valid(spread, d: int) -> None:
    """|S_j| <= d / 2^(j-1) where S_j holds diffs in [2^(j-1), 2^j - 1]."""
    bins = {}
    for diff in spread:
        if diff < 1:
            raise InvalidParams("differences must be positive")
        j = diff.bit_length()
        bins[j] = bins.get(j, 0) + 1
    for j, count in bins.items():
        if count > d / (1 << (j - 1)):
            raise InvalidParams(f"group {j} holds {count} children, over d/2^(j-1)")


def gen_sos_instance(s: int, h: int, u: int, spread, seed: Seed):
    """Bob's parent set plus Alice's copy perturbed per the spread profile.

    Returns (alice, bob, truth) where truth records the per-child changes.
    """
    if spread and max(spread) > h:
        raise InvalidParams("per-child difference cannot exceed h")
    if len(spread) > s:
        raise InvalidParams("more differing children than children")
    if u < 4 * h:
        raise InvalidParams("universe too small for fresh replacements")
    rng = seed.numpy_rng()
    h_base = max(1, (3 * h) // 4)
    children = []
    for _ in range(s):
        child = set()
        while len(child) < h_base:
            child.update(int(x) for x in rng.integers(0, u, h_base - len(child)))
        children.append(frozenset(child))
    bob = SetOfSets(children)
    alice_children = [set(c) for c in children]
    idxs = rng.permutation(s)[: len(spread)]
    for child_idx, diff in zip(idxs, spread):
        child = alice_children[child_idx]
        over = len(child) + diff - h
        lo = max(0, -(-over // 2))
        remove = min(max(diff // 2, lo), min(diff, len(child)))
        add = diff - remove
        drop = rng.permutation(sorted(child))[:remove]
        child.difference_update(int(x) for x in drop)
        while add > 0:
            x = int(rng.integers(0, u))
            if x not in child:
                child.add(x)
                add -= 1
    alice = SetOfSets(alice_children)
    truth = {
        "d": int(sum(spread)),
        "differing_children": sorted(int(i) for i in idxs),
        "spread": [int(x) for x in spread],
    }
    return alice, bob, truth


def min_matching_distance(a: SetOfSets, b: SetOfSets) -> int:
    """Exact min-cost matching between child sets (children padded with
    empty sets); the test-side ground truth for d."""
    from scipy.optimize import linear_sum_assignment

    size = max(a.s, b.s)
    if size > 64:
        raise OracleScaleExceeded("matching oracle works for s <= 64")
    pa = a.children + [frozenset()] * (size - a.s)
    pb = b.children + [frozenset()] * (size - b.s)
    cost = np.zeros((size, size), dtype=np.int64)
    for i, ca in enumerate(pa):
        for j, cb in enumerate(pb):
            cost[i, j] = len(ca ^ cb)
    rows, cols = linear_sum_assignment(cost)
    return int(cost[rows, cols].sum())


# -- naive protocol ---------------------------------------------------------------

def _naive_store_and_words(sos: SetOfSets, seed: Seed):
    fp_seed = seed.derive("naive-fp")
    store = {}
    fp_mult = {}
    for child in sos.children:
        canon = canon_child(child)
        fp = _fp(fp_seed, canon)
        store[(0, fp)] = canon
        fp_mult[fp] = fp_mult.get(fp, 0) + 1
    return store, encode_multiset(fp_mult)


def _naive_alice(ep, sos: SetOfSets, params: ProblemParams, seed: Seed):
    store, words = _naive_store_and_words(sos, seed)
    state = {"cap": None}

    def send_table(attempt: int, round_label: int):
        push_iblt(ep, words, state["cap"], seed.derive("naive-words", attempt),
                  round_label=round_label)
        if params.verify:
            ep.send(VERIFY, struct.pack("<Q", sos_verify_hash(seed, sos)),
                    round_label)

    if params.d is not None:
        state["cap"] = 2 * params.d_hat
        send_table(0, 1)
    else:
        frame = ep.recv(ESTIMATOR)
        sk_seed = seed.derive("naive-est")
        bob_sk = DiffSketch.deserialize(frame.payload, sk_seed, params.est_cap)
        mine = sketch_of(words, 2, sk_seed, params.est_cap)
        state["cap"] = max(capacity_from_estimate(bob_sk.merge(mine).query_debiased()), 1)
        send_table(0, 2)

    def on_retry():
        state["cap"] = max(2 * state["cap"], 1)
        send_table(1, 4)
        return True

    _serve_encodings(ep, store, extra_handlers={b"retry": on_retry})


def _naive_bob(ep, sos: SetOfSets, params: ProblemParams, seed: Seed):
    store, words = _naive_store_and_words(sos, seed)
    known = params.d is not None
    if not known:
        sk_seed = seed.derive("naive-est")
        ep.send(ESTIMATOR, sketch_of(words, 1, sk_seed, params.est_cap).serialize(), 1)
    attempts = 1 if known else 2
    res = None
    expect_hash = None
    for attempt in range(attempts):
        res = pull_iblt(ep, words, seed.derive("naive-words", attempt))
        if params.verify:
            expect_hash = struct.unpack("<Q", ep.recv(VERIFY).payload)[0]
        if res.complete:
            break
        if attempt + 1 < attempts:
            ep.send(CONTROL, b"retry", 3)
    if not res.complete:
        raise DecodeFailed(f"{res.residual} residual cells in fingerprint table")
    target = decode_multiset(apply_diff(words, res.positives, res.negatives))
    fp_seed = seed.derive("naive-fp")
    missing = [fp for fp in target if (0, fp) not in store]
    blobs = _fetch_encodings(ep, 0, missing)
    children = []
    for fp, mult in sorted(target.items()):
        canon = store.get((0, fp)) or blobs.get(fp)
        if canon is None or _fp(fp_seed, canon) != fp:
            raise VerifyMismatch("naive-encodings")
        children.extend([child_from_canon(canon)] * mult)
    recovered = SetOfSets(children)
    if params.verify and expect_hash is not None:
        if sos_verify_hash(seed, recovered) != expect_hash:
            raise VerifyMismatch("naive-final")
    return recovered


# -- IBLT of IBLTs (one parent level) -----------------------------------------------

def _i2_encode_all(sos: SetOfSets, params: ProblemParams, seed: Seed):
    enc_seed = seed.derive("i2-enc")
    fp_seed = seed.derive("i2-fp")
    hash_fn = pairwise_fn(seed, "i2-hash", out_bits=CHILD_HASH_BITS)
    cap = max(params.d, 1)
    encs = [encode_child(c, cap, enc_seed, hash_fn, fp_seed) for c in sos.children]
    words = encode_multiset(multiset_of(e.fingerprint for e in encs))
    store = {(1, e.fingerprint): e.to_bytes() for e in encs}
    for child in sos.children:
        canon = canon_child(child)
        store[(2, _fp(fp_seed, canon))] = canon
    return encs, words, store, enc_seed, fp_seed, hash_fn


def _i2_alice(ep, sos: SetOfSets, params: ProblemParams, seed: Seed):
    if params.d is None:
        raise InvalidParams("IBLT-of-IBLTs requires known d")
    _, words, store, *_ = _i2_encode_all(sos, params, seed)
    push_iblt(ep, words, 2 * params.d_hat, seed.derive("i2-parent"),
              round_label=1, msg_type=PARENT_IBLT)
    if params.verify:
        ep.send(VERIFY, struct.pack("<Q", sos_verify_hash(seed, sos)), 1)
    _serve_encodings(ep, store)


def _i2_bob(ep, sos: SetOfSets, params: ProblemParams, seed: Seed):
    encs, words, store, enc_seed, fp_seed, hash_fn = _i2_encode_all(
        sos, params, seed)
    res = pull_iblt(ep, words, seed.derive("i2-parent"), expect=PARENT_IBLT)
    expect_hash = None
    if params.verify:
        expect_hash = struct.unpack("<Q", ep.recv(VERIFY).payload)[0]
    if not res.complete:
        raise DecodeFailed(f"{res.residual} residual cells in parent table")
    target = decode_multiset(apply_diff(words, res.positives, res.negatives))
    mine = decode_multiset(words)
    alice_fps = sorted(fp for fp in target if fp not in mine)
    d_b = []
    by_fp = {}
    for child, enc in zip(sos.children, encs):
        by_fp.setdefault(enc.fingerprint, child)
        if target.get(enc.fingerprint, 0) != mine[enc.fingerprint]:
            d_b.append((enc.child_hash, canon_child(child), child))
    d_b.sort(key=lambda t: (t[0], t[1]))
    blobs = _fetch_encodings(ep, 1, alice_fps)
    recovered_by_fp = {}
    unmatched = []
    for fp in alice_fps:
        if fp not in blobs:
            raise VerifyMismatch("i2-encodings")
        enc = ChildEncoding.from_bytes(blobs[fp], fp_seed)
        if enc.fingerprint != fp:
            raise VerifyMismatch("i2-encodings")
        child = None
        for _, _, cand in d_b:
            child = _decode_pair(enc, cand, enc_seed, hash_fn)
            if child is not None:
                break
        if child is None:
            unmatched.append(fp)
            continue
        recovered_by_fp[fp] = child
    if unmatched:
        # no decodable partner: fetch those children verbatim instead
        canon_blobs = _fetch_encodings(ep, 2, unmatched)
        if len(canon_blobs) != len(unmatched):
            raise NoMatchFound(f"{len(unmatched)} children had no decodable partner")
        for fp, canon in canon_blobs.items():
            recovered_by_fp[fp] = child_from_canon(canon)
    children = []
    for fp, mult in sorted(target.items()):
        child = recovered_by_fp.get(fp)
        if child is None:
            child = by_fp[fp]
        children.extend([child] * mult)
    recovered = SetOfSets(children)
    if params.verify and expect_hash is not None:
        if sos_verify_hash(seed, recovered) != expect_hash:
            raise VerifyMismatch("i2-final")
    return recovered


# -- cascading protocol ---------------------------------------------------------------

def cascade_levels(d: int, h: int) -> tuple[int, bool]:
    t = max(1, math.ceil(math.log2(max(min(d, h), 2))))
    return t, h <= d


def cascade_parent_capacity(d: int, s: int, level: int) -> int:
    d_hat = min(d, s)
    if level == 1:
        return max(math.ceil(CASCADE_L1_FACTOR * d_hat), 8)
    return max(math.ceil(CASCADE_FACTOR * d / (1 << level)) + CASCADE_SLACK, 8)


def cascade_star_capacity(d: int, h: int) -> int:
    return max(math.ceil(CASCADE_FACTOR * d / h) + CASCADE_SLACK, 8)


class _CascadeCtx:
    def __init__(self, params: ProblemParams, seed: Seed):
        self.params = params
        self.t, self.with_star = cascade_levels(params.d, params.h)
        self.hash_fn = pairwise_fn(seed, "casc-hash", out_bits=CHILD_HASH_BITS)
        self.enc_seeds = {i: seed.derive("casc-enc", i) for i in range(1, self.t + 1)}
        self.fp_seeds = {i: seed.derive("casc-fp", i) for i in range(1, self.t + 1)}
        self.star_fp_seed = seed.derive("casc-star-fp")
        self.parent_seeds = {i: seed.derive("casc-parent", i)
                             for i in range(1, self.t + 1)}
        self.star_parent_seed = seed.derive("casc-parent-star")
        self._enc_cache = {}

    def encode(self, child, level: int) -> ChildEncoding:
        key = (level, child)
        enc = self._enc_cache.get(key)
        if enc is None:
            enc = encode_child(child, 1 << level, self.enc_seeds[level],
                               self.hash_fn, self.fp_seeds[level])
            self._enc_cache[key] = enc
        return enc

    def words_for(self, children, level: int) -> set[int]:
        return encode_multiset(multiset_of(
            self.encode(c, level).fingerprint for c in children))

    def star_words(self, children) -> set[int]:
        return encode_multiset(multiset_of(
            _fp(self.star_fp_seed, canon_child(c)) for c in children))


def _cascade_alice(ep, sos: SetOfSets, params: ProblemParams, seed: Seed):
    if params.d is None:
        raise InvalidParams("cascade requires known d")
    ctx = _CascadeCtx(params, seed)
    store = {}
    for level in range(1, ctx.t + 1):
        encs = [ctx.encode(c, level) for c in sos.children]
        for e in encs:
            store[(level, e.fingerprint)] = e.to_bytes()
        words = encode_multiset(multiset_of(e.fingerprint for e in encs))
        t = Iblt(cascade_parent_capacity(params.d, params.s, level),
                 ctx.parent_seeds[level])
        t.insert_set(np.fromiter(words, dtype=np.uint64, count=len(words)))
        ep.send(PARENT_IBLT, struct.pack("<B", level) + t.serialize(), 1)
    if ctx.with_star:
        for child in sos.children:
            canon = canon_child(child)
            store[(STAR_LEVEL, _fp(ctx.star_fp_seed, canon))] = canon
        words = ctx.star_words(sos.children)
        t = Iblt(cascade_star_capacity(params.d, params.h), ctx.star_parent_seed)
        t.insert_set(np.fromiter(words, dtype=np.uint64, count=len(words)))
        ep.send(PARENT_IBLT, struct.pack("<B", STAR_LEVEL) + t.serialize(), 1)
    if params.verify:
        ep.send(VERIFY, struct.pack("<Q", sos_verify_hash(seed, sos)), 1)
    _serve_encodings(ep, store)


def _cascade_bob(ep, sos: SetOfSets, params: ProblemParams, seed: Seed):
    ctx = _CascadeCtx(params, seed)
    tables = {}
    for _ in range(ctx.t + (1 if ctx.with_star else 0)):
        frame = ep.recv(PARENT_IBLT)
        level = frame.payload[0]
        seed_for = ctx.star_parent_seed if level == STAR_LEVEL else ctx.parent_seeds[level]
        tables[level] = Iblt.deserialize(frame.payload[1:], seed_for)
    expect_hash = None
    if params.verify:
        expect_hash = struct.unpack("<Q", ep.recv(VERIFY).payload)[0]

    current = list(sos.children)   # evolving guess of Alice's children
    d_b: list = []                 # Bob's differing children (level-1 finding)
    unresolved: dict = {}

    def rebuild(current, fps_of, extra, recovered):
        drop = dict(extra)
        kept = []
        for child in current:
            fp = fps_of(child)
            if drop.get(fp, 0) > 0:
                drop[fp] -= 1
                continue
            kept.append(child)
        return kept + recovered

    for level in range(1, ctx.t + 1):
        fps_of = lambda c, lv=level: ctx.encode(c, lv).fingerprint
        my_words = ctx.words_for(current, level)
        t_mine = Iblt(0, ctx.parent_seeds[level], _m=tables[level].m)
        t_mine.insert_set(np.fromiter(my_words, dtype=np.uint64, count=len(my_words)))
        res = tables[level].subtract(t_mine).decode()
        if not res.complete:
            _fetch_encodings(ep, level, [])  # keep the exchange in lockstep
            continue
        target = decode_multiset(apply_diff(my_words, res.positives, res.negatives))
        mine = decode_multiset(my_words)
        if level == 1:
            enc_by_fp = {}
            for child in current:
                e = ctx.encode(child, 1)
                enc_by_fp.setdefault(e.fingerprint, (e.child_hash, child))
            d_b = []
            for fp, mult in mine.items():
                if target.get(fp, 0) != mult:
                    h, child = enc_by_fp[fp]
                    d_b.append((h, canon_child(child), child))
            d_b.sort(key=lambda x: (x[0], x[1]))
        missing = {fp: mult for fp, mult in target.items() if fp not in mine}
        extra = {fp: mine[fp] - target.get(fp, 0)
                 for fp in mine if mine[fp] > target.get(fp, 0)}
        local_by_fp = {}
        for child in current:
            local_by_fp.setdefault(fps_of(child), child)
        # multiplicity increases of children Bob already holds need no bytes
        bumps = []
        for fp in target:
            if fp in mine and target[fp] > mine[fp]:
                bumps.extend([local_by_fp[fp]] * (target[fp] - mine[fp]))
        blobs = _fetch_encodings(ep, level, sorted(missing))
        recovered = []
        unresolved = {}
        for fp, mult in sorted(missing.items()):
            blob = blobs.get(fp)
            child = None
            if blob is not None:
                enc = ChildEncoding.from_bytes(blob, ctx.fp_seeds[level])
                for _, _, cand in d_b:
                    child = _decode_pair(enc, cand, ctx.enc_seeds[level],
                                         ctx.hash_fn)
                    if child is not None:
                        break
            if child is None:
                unresolved[fp] = mult
                continue
            recovered.extend([child] * mult)
        current = rebuild(current, fps_of, extra, recovered + bumps)
    if ctx.with_star:
        star_of = lambda c: _fp(ctx.star_fp_seed, canon_child(c))
        my_words = ctx.star_words(current)
        t_mine = Iblt(0, ctx.star_parent_seed, _m=tables[STAR_LEVEL].m)
        t_mine.insert_set(np.fromiter(my_words, dtype=np.uint64, count=len(my_words)))
        res = tables[STAR_LEVEL].subtract(t_mine).decode()
        if res.complete:
            target = decode_multiset(apply_diff(my_words, res.positives, res.negatives))
            mine = decode_multiset(my_words)
            missing = {fp: mult for fp, mult in target.items() if fp not in mine}
            extra = {fp: mine[fp] - target.get(fp, 0)
                     for fp in mine if mine[fp] > target.get(fp, 0)}
            local_by_fp = {}
            for child in current:
                local_by_fp.setdefault(star_of(child), child)
            bumps = []
            for fp in target:
                if fp in mine and target[fp] > mine[fp]:
                    bumps.extend([local_by_fp[fp]] * (target[fp] - mine[fp]))
            blobs = _fetch_encodings(ep, STAR_LEVEL, sorted(missing))
            recovered = []
            unresolved = {}
            for fp, mult in sorted(missing.items()):
                if fp in blobs:
                    recovered.extend([child_from_canon(blobs[fp])] * mult)
                else:
                    unresolved[fp] = mult
            current = rebuild(current, star_of, extra, recovered + bumps)
        else:
            _fetch_encodings(ep, STAR_LEVEL, [])
    result = SetOfSets(current)
    if params.verify and expect_hash is not None:
        if sos_verify_hash(seed, result) != expect_hash:
            if unresolved:
                raise ResidualChildren(f"{sum(unresolved.values())} children unrecovered")
            raise VerifyMismatch("cascade-final")
    return result


# -- multi-round protocol ----------------------------------------------------------------

def _mr_replication(base: int, delta: float) -> int:
    base = max(base, 2)
    return max(1, math.ceil(math.log(1.0 / delta) / math.log(base)))


def _mr_est_replicas(d_hat: int, delta: float) -> int:
    budget = delta / (4.0 * max(d_hat, 2) ** 2)
    return max(1, math.ceil(GAMMA * math.log(1.0 / (2.0 * budget)))) | 1


def _mr_hash_words(sos: SetOfSets, hash_fn):
    hashes = [hash_fn(canon_child(c)) & CHILD_HASH_MASK for c in sos.children]
    return hashes, encode_multiset(multiset_of(hashes))


def _mr_differing(sos: SetOfSets, hashes, words, other_words: dict) -> list:
    """Child instances whose hash-word multiplicity differs from the peer's,
    sorted deterministically by (hash, canonical bytes)."""
    mine = decode_multiset(words)
    out = []
    for child, h in zip(sos.children, hashes):
        if other_words.get(h, 0) != mine.get(h, 0):
            out.append((h, canon_child(child), child))
    out.sort(key=lambda x: (x[0], x[1]))
    return out


def _pack_est_list(diff_children, seed: Seed, params: ProblemParams,
                   r_est: int) -> bytes:
    parts = [struct.pack("<IH", len(diff_children), r_est)]
    for h, canon, child in diff_children:
        blob = b"".join(
            (lambda s: struct.pack("<I", len(s)) + s)(
                sketch_of(sorted(child), 1, seed.derive("mr-est", k),
                          params.est_cap).serialize())
            for k in range(r_est))
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def _parse_est_list(data: bytes, seed: Seed, params: ProblemParams):
    count, r_est = struct.unpack_from("<IH", data)
    off = 6
    out = []
    for _ in range(count):
        (blob_len,) = struct.unpack_from("<I", data, off)
        off += 4
        end = off + blob_len
        sks = []
        k = 0
        while off < end:
            (ln,) = struct.unpack_from("<I", data, off)
            off += 4
            sks.append(DiffSketch.deserialize(data[off:off + ln],
                                              seed.derive("mr-est", k),
                                              params.est_cap))
            off += ln
            k += 1
        out.append(sks)
    return out


_NO_PARTNER = 0xFFFFFFFF


def _mr_alice(ep, sos: SetOfSets, params: ProblemParams, seed: Seed):
    known = params.d is not None
    hash_fn = pairwise_fn(seed, "mr-hash", out_bits=CHILD_HASH_BITS)
    hashes, words = _mr_hash_words(sos, hash_fn)
    if known:
        d_proxy = params.d
        cap = 2 * params.d_hat
        round_base = 1
    else:
        frame = ep.recv(ESTIMATOR)
        sk_seed = seed.derive("mr-est0")
        bob_sk = DiffSketch.deserialize(frame.payload, sk_seed, params.est_cap)
        mine_sk = sketch_of(words, 2, sk_seed, params.est_cap)
        est = bob_sk.merge(mine_sk).query_debiased()
        d_proxy = max(est, 1)
        cap = max(capacity_from_estimate(est), 1)
        round_base = 2
    r1 = _mr_replication(min(d_proxy, params.s), params.delta)
    for rep in range(r1):
        t = Iblt(cap, seed.derive("mr-hash-iblt", rep))
        t.insert_set(np.fromiter(words, dtype=np.uint64, count=len(words)))
        ep.send(HASH_IBLT, struct.pack("<BI", rep, cap) + t.serialize(), round_base)
    if params.verify:
        ep.send(VERIFY, struct.pack("<Q", sos_verify_hash(seed, sos)), round_base)

    bob_tables = [ep.recv(HASH_IBLT) for _ in range(r1)]
    est_frame = ep.recv(EST_LIST)
    bob_words = None
    for rep, frame in enumerate(bob_tables):
        t_a = Iblt(cap, seed.derive("mr-hash-iblt", rep))
        t_a.insert_set(np.fromiter(words, dtype=np.uint64, count=len(words)))
        t_b = Iblt.deserialize(frame.payload[5:], seed.derive("mr-hash-iblt", rep))
        res = t_a.subtract(t_b).decode()
        if res.complete:
            bob_words = decode_multiset(
                apply_diff(words, res.negatives, res.positives))
            break
    if bob_words is None:
        raise DecodeFailed("hash tables undecodable on all replicas")
    my_diff = _mr_differing(sos, hashes, words, bob_words)
    l_b = _parse_est_list(est_frame.payload, seed, params)
    r_est = _mr_est_replicas(min(d_proxy, params.s), params.delta)
    thresh = math.isqrt(max(d_proxy - 1, 0)) + 1
    r3 = max(MR_CHILD_MIN_REPLICAS, _mr_replication(max(d_proxy, 2), params.delta))

    ep.send(CONTROL, struct.pack("<I", len(my_diff)), round_base + 2)
    for idx, (h, canon, child) in enumerate(my_diff):
        if l_b:
            mine_sks = [sketch_of(sorted(child), 2, seed.derive("mr-est", k),
                                  params.est_cap) for k in range(r_est)]
            best_j, best_d = None, None
            for j, bob_sks in enumerate(l_b):
                vals = sorted(bob_sks[k].merge(mine_sks[k]).query_debiased()
                              for k in range(len(bob_sks)))
                d_j = vals[len(vals) // 2]
                if best_d is None or d_j < best_d:
                    best_j, best_d = j, d_j
        else:
            best_j, best_d = _NO_PARTNER, max(len(child), 1)
        d_i = max(int(best_d), 1)
        if d_i >= thresh and best_j != _NO_PARTNER:
            head = struct.pack("<IIIB", best_j, d_i, h, r3)
            parts = [head]
            for rep in range(r3):
                t = Iblt(2 * d_i + MR_CHILD_CAP_SLACK,
                         seed.derive("mr-child", idx).derive("rep", rep))
                t.insert_set(np.asarray(sorted(child), dtype=np.uint64))
                blob = t.serialize()
                parts.append(struct.pack("<I", len(blob)) + blob)
            ep.send(CHILD_IBLT, b"".join(parts), round_base + 2)
        else:
            pts = eval_points(seed.derive("mr-evals", idx), d_i + 1 + EVALS_SLACK)
            ev = evaluate(child, pts)
            payload = struct.pack("<III", best_j, d_i, h) + ev.to_bytes()
            ep.send(CHILD_EVALS, payload, round_base + 2,
                    paper_bits=ev.value_bits())


def _mr_bob(ep, sos: SetOfSets, params: ProblemParams, seed: Seed):
    known = params.d is not None
    hash_fn = pairwise_fn(seed, "mr-hash", out_bits=CHILD_HASH_BITS)
    hashes, words = _mr_hash_words(sos, hash_fn)
    if known:
        d_proxy = params.d
        round_base = 1
    else:
        sk_seed = seed.derive("mr-est0")
        ep.send(ESTIMATOR,
                sketch_of(words, 1, sk_seed, params.est_cap).serialize(), 1)
        round_base = 2
    first = ep.recv(HASH_IBLT)
    (_, cap) = struct.unpack_from("<BI", first.payload)
    if not known:
        d_proxy = max(cap // 2, 1)
    r1 = _mr_replication(min(d_proxy, params.s), params.delta)
    frames = [first] + [ep.recv(HASH_IBLT) for _ in range(r1 - 1)]
    expect_hash = None
    if params.verify:
        expect_hash = struct.unpack("<Q", ep.recv(VERIFY).payload)[0]
    alice_words = None
    my_tables = []
    for rep, frame in enumerate(frames):
        t_b = Iblt(cap, seed.derive("mr-hash-iblt", rep))
        t_b.insert_set(np.fromiter(words, dtype=np.uint64, count=len(words)))
        my_tables.append(t_b)
        if alice_words is None:
            t_a = Iblt.deserialize(frame.payload[5:], seed.derive("mr-hash-iblt", rep))
            res = t_a.subtract(t_b).decode()
            if res.complete:
                alice_words = decode_multiset(
                    apply_diff(words, res.positives, res.negatives))
    if alice_words is None:
        raise DecodeFailed("hash tables undecodable on all replicas")
    my_diff = _mr_differing(sos, hashes, words, alice_words)
    r_est = _mr_est_replicas(min(d_proxy, params.s), params.delta)
    for rep, t_b in enumerate(my_tables):
        ep.send(HASH_IBLT, struct.pack("<BI", rep, cap) + t_b.serialize(),
                round_base + 1)
    ep.send(EST_LIST, _pack_est_list(my_diff, seed, params, r_est), round_base + 1)

    manifest = ep.recv(CONTROL)
    (n_msgs,) = struct.unpack_from("<I", manifest.payload)
    recovered = []
    for idx in range(n_msgs):
        frame = ep.recv((CHILD_IBLT, CHILD_EVALS))
        if frame.msg_type == CHILD_IBLT:
            b_j, d_i, h, r3 = struct.unpack_from("<IIIB", frame.payload)
            base_child = my_diff[b_j][2] if b_j != _NO_PARTNER else frozenset()
            off = 13
            child = None
            for rep in range(r3):
                (ln,) = struct.unpack_from("<I", frame.payload, off)
                off += 4
                blob = frame.payload[off:off + ln]
                off += ln
                if child is not None:
                    continue
                rep_seed = seed.derive("mr-child", idx).derive("rep", rep)
                t_a = Iblt.deserialize(blob, rep_seed)
                t_b = Iblt(0, rep_seed, _m=t_a.m)
                t_b.insert_set(np.asarray(sorted(base_child), dtype=np.uint64))
                res = t_a.subtract(t_b).decode()
                if not res.complete:
                    continue
                cand = frozenset(apply_diff(set(base_child), res.positives,
                                            res.negatives))
                if hash_fn(canon_child(cand)) & CHILD_HASH_MASK == h:
                    child = cand
            if child is None:
                raise DecodeFailed(f"child table {idx} undecodable")
            recovered.append(child)
        else:
            b_j, d_i, h = struct.unpack_from("<III", frame.payload)
            ev = EvalVector.from_bytes(frame.payload[12:],
                                       seed.derive("mr-evals", idx))
            base_child = my_diff[b_j][2] if b_j != _NO_PARTNER else frozenset()
            only_a, only_b = reconcile(ev, base_child, len(ev.values) - 1)
            cand = frozenset(apply_diff(set(base_child), only_a, only_b))
            if hash_fn(canon_child(cand)) & CHILD_HASH_MASK != h:
                raise VerifyMismatch("multiround-evals")
            recovered.append(cand)
    gone = {id(t[2]) for t in my_diff}
    children = [c for c in sos.children if id(c) not in gone] + recovered
    result = SetOfSets(children)
    if params.verify and expect_hash is not None:
        if sos_verify_hash(seed, result) != expect_hash:
            raise VerifyMismatch("multiround-final")
    return result


# -- repeated doubling wrapper --------------------------------------------------------

class _NextAttempt(Exception):
    def __init__(self, payload):
        self.payload = payload


class _AttemptEndpoint:
    """Endpoint view for one doubling attempt.  A control frame announcing
    the next attempt (or completion) unwinds the inner protocol."""

    def __init__(self, ep):
        self._ep = ep

    def send(self, *a, **kw):
        self._ep.send(*a, **kw)

    def recv(self, expect=None):
        if expect is not None:
            allowed = expect if isinstance(expect, (set, tuple, list)) else (expect,)
            expect = tuple(allowed) + (CONTROL,)
        frame = self._ep.recv(expect)
        if frame.msg_type == CONTROL and frame.payload in (b"again", b"done"):
            raise _NextAttempt(frame.payload)
        return frame


def _attempt_params(params: ProblemParams, d: int) -> ProblemParams:
    return ProblemParams(params.s, params.h, params.u, d=d, delta=params.delta,
                         verify=True, est_cap=params.est_cap)


def _doubling_alice(inner_alice):
    def run(ep, sos: SetOfSets, params: ProblemParams, seed: Seed):
        d = 1
        attempt = 0
        while True:
            try:
                inner_alice(_AttemptEndpoint(ep), sos, _attempt_params(params, d),
                            seed.derive("attempt", attempt))
                return
            except _NextAttempt as sig:
                if sig.payload == b"done":
                    return
            except PeerDisconnected:
                return
            d *= 2
            attempt += 1
            if d > max(sos.n, 1) * 2:
                raise GiveUp("doubling exceeded total element count")
    return run


def _doubling_bob(inner_bob):
    def run(ep, sos: SetOfSets, params: ProblemParams, seed: Seed):
        d = 1
        attempt = 0
        while True:
            try:
                result = inner_bob(_AttemptEndpoint(ep), sos,
                                   _attempt_params(params, d),
                                   seed.derive("attempt", attempt))
            except (DecodeFailed, VerifyMismatch, ResidualChildren,
                    NoMatchFound, InterpolationFailure):
                result = None
            if result is not None:
                ep.send(CONTROL, b"done", ROUND_1B)
                return result
            if d > max(sos.n, 1):
                raise GiveUp("doubling exceeded total element count")
            ep.send(CONTROL, b"again", ROUND_1B)
            d *= 2
            attempt += 1
    return run


register_protocol("ssr-naive", _naive_alice, _naive_bob)
register_protocol("ssr-iblt2", _i2_alice, _i2_bob)
register_protocol("ssr-cascade", _cascade_alice, _cascade_bob)
register_protocol("ssr-multiround", _mr_alice, _mr_bob)

_DOUBLING_INNER = {
    "ssr-iblt2": (_i2_alice, _i2_bob),
    "ssr-cascade": (_cascade_alice, _cascade_bob),
    "ssr-naive": (_naive_alice, _naive_bob),
}


def with_doubling(protocol: str, alice: SetOfSets, bob: SetOfSets, seed: Seed,
                  params: ProblemParams | None = None, backend: str = "inproc"):
    """Run a known-d protocol at d = 1, 2, 4, ... until the verify hash matches."""
    if protocol not in _DOUBLING_INNER:
        raise InvalidParams(f"no doubling wrapper for {protocol!r}")
    inner_a, inner_b = _DOUBLING_INNER[protocol]
    if params is None:
        params = ProblemParams(
            s=max(alice.s, bob.s),
            h=max((len(c) for c in alice.children + bob.children), default=1),
            u=1 << 61)
    name = f"{protocol}-doubling"
    from .transport import PROTOCOL_IDS, REGISTRY
    if name not in REGISTRY:
        PROTOCOL_IDS[name] = PROTOCOL_IDS[protocol] | 0x80
        register_protocol(name, _doubling_alice(inner_a), _doubling_bob(inner_b))
    return run_session(name, alice, bob, params, seed, backend)


# -- direct entry points ------------------------------------------------------------------

def ssr_naive(alice, bob, params: ProblemParams, seed: Seed, backend="inproc"):
    return run_session("ssr-naive", alice, bob, params, seed, backend)


def ssr_iblt2(alice, bob, params: ProblemParams, seed: Seed, backend="inproc"):
    return run_session("ssr-iblt2", alice, bob, params, seed, backend)


def ssr_cascade(alice, bob, params: ProblemParams, seed: Seed, backend="inproc"):
    return run_session("ssr-cascade", alice, bob, params, seed, backend)


def ssr_multiround(alice, bob, params: ProblemParams, seed: Seed, backend="inproc"):
    return run_session("ssr-multiround", alice, bob, params, seed, backend)
