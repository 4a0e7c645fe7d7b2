"""Protocol session engine: frames, channels, transcripts, accounting.

Frame layout (little-endian):

    magic "SOSR" | version u8 | protocolId u8 | roundLabel u8 | msgType u8
    | payloadLen u32 | seq u32 | payload | crc32 u32

The 16-byte header plus 4-byte CRC is transport overhead; accounting reports
wire bytes, raw payload bytes, and "paper bits" (semantic content only, the
figure comparable to communication bounds) separately.  Frames tagged with
round label 0x1B are the encoding-exchange messages that fixed-width parent
cells force on us; they are tallied apart from the protocol's nominal rounds.

Both backends (in-process queues, TCP loopback sockets) run the two parties
as independent threads over the same encode/decode path, so payload byte
sequences are identical for identical seeds.
"""

from __future__ import annotations

import base64
import json
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

from .errors import (FramingError, PeerDisconnected, ProtocolViolation,
                     SetsyncError)

MAGIC = b"SOSR"
VERSION = 1
_HEAD = struct.Struct("<4sBBBBII")
HEADER_BYTES = _HEAD.size          # 16
CRC_BYTES = 4
ROUND_1B = 0x1B

# message types
ESTIMATOR = 1
IBLT_MSG = 2
EVALS = 3
VERIFY = 4
PARENT_IBLT = 5
ENC_REQUEST = 6
ENC_RESPONSE = 7
HASH_IBLT = 8
EST_LIST = 9
CHILD_IBLT = 10
CHILD_EVALS = 11
ORACLE_FP = 12
EDGE_IBLT = 13
CONTROL = 14

MSG_NAMES = {
    ESTIMATOR: "ESTIMATOR", IBLT_MSG: "IBLT", EVALS: "EVALS",
    VERIFY: "VERIFY", PARENT_IBLT: "PARENT_IBLT", ENC_REQUEST: "ENC_REQUEST",
    ENC_RESPONSE: "ENC_RESPONSE", HASH_IBLT: "HASH_IBLT", EST_LIST: "EST_LIST",
    CHILD_IBLT: "CHILD_IBLT", CHILD_EVALS: "CHILD_EVALS",
    ORACLE_FP: "ORACLE_FP", EDGE_IBLT: "EDGE_IBLT", CONTROL: "CONTROL",
}

# protocol ids
PROTOCOL_IDS = {
    "set-known": 1, "set-unknown": 2, "set-poly": 3,
    "ssr-naive": 4, "ssr-iblt2": 5, "ssr-cascade": 6, "ssr-multiround": 7,
    "graph-oracle": 8, "graph-degorder": 9, "graph-degnbr": 10,
    "forest": 11,
}


def encode_frame(protocol_id: int, round_label: int, msg_type: int,
                 payload: bytes, seq: int) -> bytes:
    head = _HEAD.pack(MAGIC, VERSION, protocol_id, round_label, msg_type,
                      len(payload), seq & 0xFFFFFFFF)
    crc = zlib.crc32(head + payload) & 0xFFFFFFFF
    return head + payload + struct.pack("<I", crc)


@dataclass
class Frame:
    protocol_id: int
    round_label: int
    msg_type: int
    payload: bytes
    seq: int

    @property
    def wire_size(self) -> int:
        return HEADER_BYTES + len(self.payload) + CRC_BYTES


class FrameDecoder:
    """Incremental decoder; survives arbitrary fragmentation of the stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        out = []
        while True:
            f = self._try_decode()
            if f is None:
                return out
            out.append(f)

    def _try_decode(self):
        buf = self._buf
        if len(buf) < HEADER_BYTES:
            return None
        magic, version, pid, rlabel, mtype, plen, seq = _HEAD.unpack_from(buf)
        if magic != MAGIC or version != VERSION:
            raise FramingError("bad magic or version")
        total = HEADER_BYTES + plen + CRC_BYTES
        if len(buf) < total:
            return None
        payload = bytes(buf[HEADER_BYTES:HEADER_BYTES + plen])
        (crc,) = struct.unpack_from("<I", buf, HEADER_BYTES + plen)
        if crc != (zlib.crc32(bytes(buf[:HEADER_BYTES]) + payload) & 0xFFFFFFFF):
            raise FramingError("crc mismatch")
        del buf[:total]
        return Frame(pid, rlabel, mtype, payload, seq)


@dataclass
class FrameRecord:
    direction: str            # "AB" or "BA"
    round_label: int
    msg_type: int
    payload_len: int
    paper_bits: int
    seq: int
    t_wall: float
    payload: bytes | None = None


@dataclass
class Transcript:
    protocol: str = ""
    frames: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _seq: int = 0

    def next_seq(self) -> int:
        with self._lock:
            s = self._seq
            self._seq += 1
            return s

    def record(self, rec: FrameRecord) -> None:
        with self._lock:
            self.frames.append(rec)

    def payload_sequence(self, direction=None) -> list[bytes]:
        recs = sorted(self.frames, key=lambda r: r.seq)
        return [r.payload for r in recs
                if r.payload is not None and (direction is None or r.direction == direction)]


def account(t: Transcript) -> dict:
    """Byte/round totals; paper rounds exclude the 0x1B encoding exchanges."""
    recs = sorted(t.frames, key=lambda r: r.seq)
    summary = {
        "protocol": t.protocol,
        "bytes_ab": 0, "bytes_ba": 0,
        "payload_ab": 0, "payload_ba": 0,
        "paper_bits_ab": 0, "paper_bits_ba": 0,
        "rounds": 0, "rounds_actual": 0, "round_1b_messages": 0,
        "per_type": {},
        "frames": [],
    }
    last_dir = None
    last_dir_all = None
    for r in recs:
        wire = HEADER_BYTES + r.payload_len + CRC_BYTES
        if r.direction == "AB":
            summary["bytes_ab"] += wire
            summary["payload_ab"] += r.payload_len
            summary["paper_bits_ab"] += r.paper_bits
        else:
            summary["bytes_ba"] += wire
            summary["payload_ba"] += r.payload_len
            summary["paper_bits_ba"] += r.paper_bits
        name = MSG_NAMES.get(r.msg_type, str(r.msg_type))
        pt = summary["per_type"].setdefault(name, {"count": 0, "payload_bytes": 0})
        pt["count"] += 1
        pt["payload_bytes"] += r.payload_len
        summary["frames"].append(
            {"dir": r.direction, "type": name, "round": r.round_label,
             "payload_len": r.payload_len})
        if r.direction != last_dir_all:
            summary["rounds_actual"] += 1
            last_dir_all = r.direction
        if r.round_label == ROUND_1B:
            summary["round_1b_messages"] += 1
        else:
            if r.direction != last_dir:
                summary["rounds"] += 1
                last_dir = r.direction
    summary["paper_bits"] = summary["paper_bits_ab"] + summary["paper_bits_ba"]
    summary["payload_bytes"] = summary["payload_ab"] + summary["payload_ba"]
    summary["wire_bytes"] = summary["bytes_ab"] + summary["bytes_ba"]
    return summary


def export_jsonl(t: Transcript, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        for r in sorted(t.frames, key=lambda x: x.seq):
            f.write(json.dumps({
                "dir": r.direction, "round": r.round_label,
                "type": MSG_NAMES.get(r.msg_type, r.msg_type),
                "seq": r.seq, "t": r.t_wall,
                "payload": base64.b64encode(r.payload or b"").decode(),
            }) + "\n")
        f.write(json.dumps({"summary": account(t)}) + "\n")


class Endpoint:
    """One party's view of the channel.  Subclasses move the bytes."""

    def __init__(self, name: str, protocol_id: int, transcript: Transcript,
                 capture_payload: bool = True, record_recv: bool = False,
                 timeout: float = 120.0):
        self.name = name                      # "A" or "B"
        self.protocol_id = protocol_id
        self.transcript = transcript
        self.capture_payload = capture_payload
        self.record_recv = record_recv
        self.timeout = timeout
        self._decoder = FrameDecoder()
        self._pending = []

    # subclass hooks
    def _write(self, data: bytes) -> None:
        raise NotImplementedError

    def _read(self) -> bytes:
        raise NotImplementedError

    def send(self, msg_type: int, payload: bytes, round_label: int = 1,
             paper_bits: int | None = None) -> None:
        seq = self.transcript.next_seq()
        data = encode_frame(self.protocol_id, round_label, msg_type, payload, seq)
        direction = "AB" if self.name == "A" else "BA"
        self.transcript.record(FrameRecord(
            direction, round_label, msg_type, len(payload),
            paper_bits if paper_bits is not None else 8 * len(payload),
            seq, time.time(),
            payload if self.capture_payload else None))
        self._write(data)

    def recv(self, expect=None) -> Frame:
        while not self._pending:
            data = self._read()
            if not data:
                raise PeerDisconnected("stream ended mid-session")
            self._pending.extend(self._decoder.feed(data))
        frame = self._pending.pop(0)
        if frame.protocol_id != self.protocol_id:
            raise ProtocolViolation(
                f"frame for protocol {frame.protocol_id}, expected {self.protocol_id}")
        if expect is not None:
            allowed = expect if isinstance(expect, (set, tuple, list)) else (expect,)
            if frame.msg_type not in allowed:
                names = [MSG_NAMES.get(x, x) for x in allowed]
                raise ProtocolViolation(
                    f"unexpected {MSG_NAMES.get(frame.msg_type, frame.msg_type)}, "
                    f"wanted one of {names}")
        if self.record_recv:
            direction = "BA" if self.name == "A" else "AB"
            self.transcript.record(FrameRecord(
                direction, frame.round_label, frame.msg_type, len(frame.payload),
                8 * len(frame.payload), self.transcript.next_seq(), time.time(),
                frame.payload if self.capture_payload else None))
        return frame


class QueueEndpoint(Endpoint):
    def __init__(self, name, protocol_id, transcript, out_q, in_q, **kw):
        super().__init__(name, protocol_id, transcript, **kw)
        self._out = out_q
        self._in = in_q

    def _write(self, data: bytes) -> None:
        self._out.put(data)

    def _read(self) -> bytes:
        try:
            data = self._in.get(timeout=self.timeout)
        except queue.Empty:
            raise PeerDisconnected("peer timed out") from None
        if data is None:
            return b""
        return data

    def close(self):
        self._out.put(None)


class SocketEndpoint(Endpoint):
    def __init__(self, name, protocol_id, transcript, sock, **kw):
        super().__init__(name, protocol_id, transcript, **kw)
        self._sock = sock
        sock.settimeout(self.timeout)

    def _write(self, data: bytes) -> None:
        self._sock.sendall(data)

    def _read(self) -> bytes:
        try:
            return self._sock.recv(65536)
        except socket.timeout:
            raise PeerDisconnected("socket timed out") from None
        except OSError:
            return b""

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


# -- protocol registry and session driver -----------------------------------

@dataclass
class Protocol:
    name: str
    protocol_id: int
    alice: callable
    bob: callable


REGISTRY: dict[str, Protocol] = {}


def register_protocol(name: str, alice, bob) -> None:
    REGISTRY[name] = Protocol(name, PROTOCOL_IDS[name], alice, bob)


def _run_parties(ep_a, ep_b, proto, alice_data, bob_data, params, seed,
                 close_a, close_b):
    result = {}
    errors = {}

    def run(role, ep, fn, data):
        try:
            result[role] = fn(ep, data, params, seed)
        except BaseException as e:  # noqa: BLE001 - propagated below
            errors[role] = e
        finally:
            (close_a if role == "A" else close_b)()

    ta = threading.Thread(target=run, args=("A", ep_a, proto.alice, alice_data))
    tb = threading.Thread(target=run, args=("B", ep_b, proto.bob, bob_data))
    ta.start()
    tb.start()
    ta.join()
    tb.join()
    if errors:
        # prefer a protocol-level error over the secondary disconnect
        for err in errors.values():
            if not isinstance(err, PeerDisconnected):
                raise err
        raise next(iter(errors.values()))
    return result["B"]


def run_session(protocol: str, alice_data, bob_data, params=None, seed=None,
                backend: str = "inproc", capture_payload: bool = True,
                timeout: float = 120.0):
    """Drive both parties of a protocol; returns (bob result, transcript)."""
    if protocol not in REGISTRY:
        raise SetsyncError(f"unknown protocol {protocol!r}")
    proto = REGISTRY[protocol]
    transcript = Transcript(protocol=protocol)
    if backend == "inproc":
        q_ab, q_ba = queue.Queue(), queue.Queue()
        ep_a = QueueEndpoint("A", proto.protocol_id, transcript, q_ab, q_ba,
                             capture_payload=capture_payload, timeout=timeout)
        ep_b = QueueEndpoint("B", proto.protocol_id, transcript, q_ba, q_ab,
                             capture_payload=capture_payload, timeout=timeout)
        close_a, close_b = ep_a.close, ep_b.close
    elif backend == "socket":
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]
        sock_a = socket.create_connection(("127.0.0.1", port))
        sock_b, _ = listener.accept()
        listener.close()
        sock_a.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock_b.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        ep_a = SocketEndpoint("A", proto.protocol_id, transcript, sock_a,
                              capture_payload=capture_payload, timeout=timeout)
        ep_b = SocketEndpoint("B", proto.protocol_id, transcript, sock_b,
                              capture_payload=capture_payload, timeout=timeout)
        close_a, close_b = ep_a.close, ep_b.close
    else:
        raise SetsyncError(f"unknown backend {backend!r}")
    result = _run_parties(ep_a, ep_b, proto, alice_data, bob_data, params, seed,
                          close_a, close_b)
    return result, transcript
