"""Single-level set and multiset reconciliation sessions.

Three session flavors: known-d one-round IBLT, unknown-d two-round
(estimator then IBLT, with one capacity-doubling retry), and the
deterministic polynomial route.  Multisets ride along via the injective
pair encoding word = element * 2^20 + multiplicity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import transport
from .charpoly import EvalVector, eval_points, evaluate, reconcile
from .errors import DecodeFailed, InvalidParams, RangeExceeded, VerifyMismatch
from .estimator import DiffSketch, sketch_of
from .iblt import Iblt
from .rng import Seed, pairwise_fn
from .transport import (CONTROL, ESTIMATOR, EVALS, IBLT_MSG, VERIFY,
                        PeerDisconnected, register_protocol, run_session)

WIRE_SKETCH_CAP = 16      # subroutine capacity for estimators that cross the wire
SAFETY = 2                # capacity = SAFETY * debiased estimate
MULT_ELEM_BITS = 41
MULT_BITS = 20


@dataclass
class ReconConfig:
    method: str = "iblt"            # "iblt" or "charpoly"
    d_bound: int | None = None       # present iff d is known
    delta: float = 0.01
    verify: bool = True
    est_cap: int = WIRE_SKETCH_CAP
    safety: int = SAFETY


# -- verification hash --------------------------------------------------------

def whole_set_hash(seed: Seed, keys) -> int:
    """Order-independent 64-bit hash of a multiset of words."""
    xs = np.asarray(list(keys) if not isinstance(keys, np.ndarray) else keys,
                    dtype=np.uint64)
    if xs.size == 0:
        return 0
    hv = pairwise_fn(seed, "verify-hash").many(xs)
    return int(hv.sum(dtype=np.uint64))


def _send_verify(ep, seed, keys, round_label):
    ep.send(VERIFY, struct.pack("<Q", whole_set_hash(seed, keys)), round_label)


# -- multiset pair encoding ---------------------------------------------------

def encode_multiset(items) -> set[int]:
    """{element: multiplicity} (or (elem, mult) pairs) -> set of packed words."""
    if isinstance(items, dict):
        items = items.items()
    out = set()
    for elem, mult in items:
        elem = int(elem)
        mult = int(mult)
        if elem >= (1 << MULT_ELEM_BITS) or elem < 0:
            raise RangeExceeded(f"element {elem} needs more than 41 bits")
        if mult < 1 or mult >= (1 << MULT_BITS):
            raise RangeExceeded(f"multiplicity {mult} outside [1, 2^20)")
        out.add(elem * (1 << MULT_BITS) + min(mult, (1 << MULT_BITS) - 1))
    return out


def decode_multiset(words) -> dict[int, int]:
    out = {}
    for w in words:
        w = int(w)
        out[w >> MULT_BITS] = w & ((1 << MULT_BITS) - 1)
    return out


def multiset_of(iterable) -> dict[int, int]:
    out = {}
    for x in iterable:
        out[x] = out.get(x, 0) + 1
    return out


# -- composable channel helpers ----------------------------------------------

def push_iblt(ep, keys, capacity, seed, round_label=1, msg_type=IBLT_MSG):
    t = Iblt(capacity, seed)
    t.insert_set(np.fromiter(keys, dtype=np.uint64, count=len(keys))
                 if not isinstance(keys, np.ndarray) else keys)
    ep.send(msg_type, t.serialize(), round_label)
    return t


def pull_iblt(ep, keys, seed, expect=IBLT_MSG):
    """Receive a table, delete local keys, decode.  Shape follows the sender."""
    frame = ep.recv(expect)
    t_a = Iblt.deserialize(frame.payload, seed)
    t_b = Iblt(0, seed, _m=t_a.m)
    t_b.insert_set(np.fromiter(keys, dtype=np.uint64, count=len(keys))
                   if not isinstance(keys, np.ndarray) else keys)
    return t_a.subtract(t_b).decode()


def apply_diff(local: set, positives: set, negatives: set) -> set:
    return (local - negatives) | positives


# -- known-d (one round) -------------------------------------------------------

def _known_alice(ep, data, cfg: ReconConfig, seed: Seed):
    d = cfg.d_bound
    if d is None:
        raise InvalidParams("known-d session requires d_bound")
    tab_seed = seed.derive("set-known")
    push_iblt(ep, data, d, tab_seed, round_label=1)
    if cfg.verify:
        _send_verify(ep, seed, data, 1)


def _known_bob(ep, data, cfg: ReconConfig, seed: Seed):
    tab_seed = seed.derive("set-known")
    res = pull_iblt(ep, data, tab_seed)
    expect_hash = None
    if cfg.verify:
        expect_hash = struct.unpack("<Q", ep.recv(VERIFY).payload)[0]
    if not res.complete:
        raise DecodeFailed(f"{res.residual} residual cells")
    recovered = apply_diff(set(data), res.positives, res.negatives)
    if expect_hash is not None and whole_set_hash(seed, recovered) != expect_hash:
        raise VerifyMismatch("set-known")
    return recovered


# -- unknown-d (two rounds, one doubling retry) ---------------------------------

def capacity_from_estimate(estimate: int, safety: int = SAFETY) -> int:
    return safety * int(estimate)


def _unknown_alice(ep, data, cfg: ReconConfig, seed: Seed):
    frame = ep.recv(ESTIMATOR)
    sk_seed = seed.derive("set-est")
    bob_sk = DiffSketch.deserialize(frame.payload, sk_seed, cfg.est_cap)
    mine = sketch_of(data, 2, sk_seed, cfg.est_cap)
    est = bob_sk.merge(mine).query_debiased()
    capacity = capacity_from_estimate(est, cfg.safety)
    push_iblt(ep, data, capacity, seed.derive("set-attempt", 0), round_label=2)
    if cfg.verify:
        _send_verify(ep, seed, data, 2)
    try:
        ep.recv(CONTROL)
    except PeerDisconnected:
        return
    capacity = max(2 * capacity, 1)
    push_iblt(ep, data, capacity, seed.derive("set-attempt", 1), round_label=4)
    if cfg.verify:
        _send_verify(ep, seed, data, 4)


def _unknown_bob(ep, data, cfg: ReconConfig, seed: Seed):
    sk_seed = seed.derive("set-est")
    sk = sketch_of(data, 1, sk_seed, cfg.est_cap)
    ep.send(ESTIMATOR, sk.serialize(), 1)
    local = set(data)
    for attempt in range(2):
        res = pull_iblt(ep, data, seed.derive("set-attempt", attempt))
        expect_hash = None
        if cfg.verify:
            expect_hash = struct.unpack("<Q", ep.recv(VERIFY).payload)[0]
        ok = res.complete
        recovered = apply_diff(local, res.positives, res.negatives) if ok else None
        if ok and expect_hash is not None:
            ok = whole_set_hash(seed, recovered) == expect_hash
        if ok:
            return recovered
        if attempt == 0:
            ep.send(CONTROL, b"retry", 3)
    if not res.complete:
        raise DecodeFailed(f"{res.residual} residual cells after retry")
    raise VerifyMismatch("set-unknown")


# -- polynomial (one round, deterministic) --------------------------------------

def _poly_alice(ep, data, cfg: ReconConfig, seed: Seed):
    d = cfg.d_bound
    if d is None:
        raise InvalidParams("polynomial session requires d_bound")
    pts = eval_points(seed.derive("set-poly"), d + 1)
    ev = evaluate(data, pts)
    ep.send(EVALS, ev.to_bytes(), 1, paper_bits=ev.value_bits())
    if cfg.verify:
        _send_verify(ep, seed, data, 1)


def _poly_bob(ep, data, cfg: ReconConfig, seed: Seed):
    frame = ep.recv(EVALS)
    ev = EvalVector.from_bytes(frame.payload, seed.derive("set-poly"))
    expect_hash = None
    if cfg.verify:
        expect_hash = struct.unpack("<Q", ep.recv(VERIFY).payload)[0]
    only_alice, only_bob = reconcile(ev, data, cfg.d_bound)
    recovered = apply_diff(set(data), only_alice, only_bob)
    if expect_hash is not None and whole_set_hash(seed, recovered) != expect_hash:
        raise VerifyMismatch("set-poly")
    return recovered


register_protocol("set-known", _known_alice, _known_bob)
register_protocol("set-unknown", _unknown_alice, _unknown_bob)
register_protocol("set-poly", _poly_alice, _poly_bob)


# -- direct entry points ---------------------------------------------------------

def reconcile_known(alice_set, bob_set, d: int, seed: Seed, verify: bool = True,
                    backend: str = "inproc"):
    cfg = ReconConfig(d_bound=d, verify=verify)
    return run_session("set-known", alice_set, bob_set, cfg, seed, backend)


def reconcile_unknown(alice_set, bob_set, seed: Seed, verify: bool = True,
                      backend: str = "inproc", est_cap: int = WIRE_SKETCH_CAP):
    cfg = ReconConfig(verify=verify, est_cap=est_cap)
    return run_session("set-unknown", alice_set, bob_set, cfg, seed, backend)


def reconcile_poly(alice_set, bob_set, d: int, seed: Seed, verify: bool = True,
                   backend: str = "inproc"):
    cfg = ReconConfig(method="charpoly", d_bound=d, verify=verify)
    return run_session("set-poly", alice_set, bob_set, cfg, seed, backend)
