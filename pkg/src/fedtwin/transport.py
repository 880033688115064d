"""Binary parameter format, message framing and the socket round protocol.

Parameter blob (all integers little-endian)::

    u32 entry count
    per entry: u16 name length, UTF-8 name, u32 rows, u32 cols
    all values as f64, row-major, in manifest order

Frame::

    "FDTW" | u8 version (1) | u8 type | u32 round | u64 payload length | payload

See protocol.md for payload layouts and a worked hex dump.
"""

from __future__ import annotations

import logging
import math
import socket
import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import BinaryIO, Union

import numpy as np

from .errors import FormatError, ProtocolError
from .federation import ClientMetrics, ClientNode, ClientUpdate, RoundReport, fedavg, make_report

log = logging.getLogger(__name__)

MAGIC = b"FDTW"
VERSION = 1
HEADER = struct.Struct("<4sBBIQ")
HEADER_SIZE = HEADER.size  # 18
DEFAULT_MAX_PAYLOAD = 256 * 1024 * 1024

TYPE_JOIN, TYPE_GLOBAL, TYPE_UPDATE, TYPE_SKIP, TYPE_SHUTDOWN = range(5)

PHASE_TRAIN = 0
PHASE_EVALUATE = 1

Manifest = list[tuple[str, int, int]]


# --------------------------------------------------------------------------
# Parameter serialization
# --------------------------------------------------------------------------

def serialize_params(manifest: Sequence[tuple[str, int, int]], values: Sequence[np.ndarray]) -> bytes:
    if len(manifest) != len(values):
        raise FormatError(f"manifest has {len(manifest)} entries but {len(values)} tensors were given", 0)
    parts = [struct.pack("<I", len(manifest))]
    for name, rows, cols in manifest:
        raw = name.encode("utf-8")
        if rows < 1 or cols < 1:
            raise FormatError(f"tensor {name!r} has an empty shape ({rows}, {cols})", 0)
        if len(raw) > 0xFFFF:
            raise FormatError(f"parameter name {name[:32]!r}... is longer than 65535 bytes", 0)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", rows, cols))
    for (name, rows, cols), v in zip(manifest, values):
        arr = np.asarray(v, dtype=np.float64)
        if arr.shape != (rows, cols):
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, manifest says ({rows}, {cols})", 0)
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def _take(buf: memoryview, offset: int, n: int, what: str) -> memoryview:
    if offset + n > len(buf):
        raise FormatError(f"truncated buffer while reading {what}: need {n} bytes, {len(buf) - offset} left", offset)
    return buf[offset:offset + n]


def deserialize_params(data: bytes | memoryview, offset: int = 0,
                       exact: bool = True) -> tuple[Manifest, list[np.ndarray]] | tuple[Manifest, list[np.ndarray], int]:
    """Inverse of :func:`serialize_params`.

    With ``exact=True`` trailing bytes are an error and ``(manifest, values)``
    is returned; otherwise the end offset is returned as a third element.
    """
    buf = memoryview(data)
    (count,) = struct.unpack("<I", _take(buf, offset, 4, "entry count"))
    offset += 4
    manifest: Manifest = []
    for i in range(count):
        (n,) = struct.unpack("<H", _take(buf, offset, 2, f"name length of entry {i}"))
        offset += 2
        raw = bytes(_take(buf, offset, n, f"name of entry {i}"))
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"name of entry {i} is not valid UTF-8", offset) from None
        offset += n
        rows, cols = struct.unpack("<II", _take(buf, offset, 8, f"shape of {name!r}"))
        if rows == 0 or cols == 0:
            raise FormatError(f"tensor {name!r} has an empty shape ({rows}, {cols})", offset)
        offset += 8
        manifest.append((name, rows, cols))
    values = []
    for name, rows, cols in manifest:
        nbytes = rows * cols * 8
        chunk = _take(buf, offset, nbytes, f"values of {name!r}")
        values.append(np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(rows, cols))
        offset += nbytes
    if exact:
        if offset != len(buf):
            raise FormatError(f"{len(buf) - offset} unexpected trailing bytes after {count} tensors", offset)
        return manifest, values
    return manifest, values, offset


# --------------------------------------------------------------------------
# Messages
# --------------------------------------------------------------------------

@dataclass
class JoinRequest:
    client_id: int


@dataclass
class GlobalModel:
    round: int
    manifest: Manifest
    values: list[np.ndarray]
    phase: int = PHASE_TRAIN

    def __eq__(self, other) -> bool:
        return (isinstance(other, GlobalModel) and self.round == other.round and self.phase == other.phase
                and _params_equal(self.manifest, self.values, other.manifest, other.values))


@dataclass
class LocalUpdate:
    round: int
    client_id: int
    m: int
    manifest: Manifest = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    train_mse: float = math.nan
    test_mse: float = math.nan

    def __eq__(self, other) -> bool:
        return (isinstance(other, LocalUpdate) and (self.round, self.client_id, self.m)
                == (other.round, other.client_id, other.m)
                and _same_float(self.train_mse, other.train_mse) and _same_float(self.test_mse, other.test_mse)
                and _params_equal(self.manifest, self.values, other.manifest, other.values))


@dataclass
class Skip:
    round: int
    client_id: int
    reason: str


@dataclass
class Shutdown:
    pass


Message = Union[JoinRequest, GlobalModel, LocalUpdate, Skip, Shutdown]


def _same_float(a: float, b: float) -> bool:
    return struct.pack("<d", a) == struct.pack("<d", b)


def _params_equal(m1, v1, m2, v2) -> bool:
    if [tuple(e) for e in m1] != [tuple(e) for e in m2] or len(v1) != len(v2):
        return False
    return all(np.asarray(a).tobytes() == np.asarray(b).tobytes() for a, b in zip(v1, v2))


def _encode(message: Message) -> tuple[int, int, bytes]:
    if isinstance(message, JoinRequest):
        return TYPE_JOIN, 0, struct.pack("<I", message.client_id)
    if isinstance(message, GlobalModel):
        return TYPE_GLOBAL, message.round, bytes([message.phase]) + serialize_params(message.manifest, message.values)
    if isinstance(message, LocalUpdate):
        head = struct.pack("<IQdd", message.client_id, message.m, message.train_mse, message.test_mse)
        return TYPE_UPDATE, message.round, head + serialize_params(message.manifest, message.values)
    if isinstance(message, Skip):
        reason = message.reason.encode("utf-8")
        return TYPE_SKIP, message.round, struct.pack("<IH", message.client_id, len(reason)) + reason
    if isinstance(message, Shutdown):
        return TYPE_SHUTDOWN, 0, b""
    raise ProtocolError(f"cannot frame {type(message).__name__}")


def _decode(kind: int, round_: int, payload: bytes) -> Message:
    try:
        if kind == TYPE_JOIN:
            (cid,) = struct.unpack("<I", payload)
            return JoinRequest(cid)
        if kind == TYPE_GLOBAL:
            if not payload:
                raise FormatError("empty GlobalModel payload", HEADER_SIZE)
            manifest, values = deserialize_params(payload, 1)
            return GlobalModel(round_, manifest, values, payload[0])
        if kind == TYPE_UPDATE:
            cid, m, train_mse, test_mse = struct.unpack_from("<IQdd", payload)
            manifest, values = deserialize_params(payload, 28)
            return LocalUpdate(round_, cid, m, manifest, values, train_mse, test_mse)
        if kind == TYPE_SKIP:
            cid, n = struct.unpack_from("<IH", payload)
            if len(payload) != 6 + n:
                raise FormatError("Skip reason length does not match payload", HEADER_SIZE + 6)
            return Skip(round_, cid, payload[6:].decode("utf-8"))
        if kind == TYPE_SHUTDOWN:
            if payload:
                raise FormatError("Shutdown carries no payload", HEADER_SIZE)
            return Shutdown()
    except struct.error as exc:
        raise FormatError(f"malformed payload for message type {kind}: {exc}", HEADER_SIZE) from None
    except UnicodeDecodeError:
        raise FormatError("Skip reason is not valid UTF-8", HEADER_SIZE + 6) from None
    raise ProtocolError(f"unknown message type {kind}")


def frame(message: Message) -> bytes:
    kind, round_, payload = _encode(message)
    return HEADER.pack(MAGIC, VERSION, kind, round_, len(payload)) + payload


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def deframe(stream: BinaryIO, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Message:
    """Read exactly one frame from ``stream`` (anything with ``read(n)``).

    Raises EOFError if the stream ends cleanly before a frame starts.
    """
    header = _read_exact(stream, HEADER_SIZE)
    if not header:
        raise EOFError("stream closed")
    if len(header) < HEADER_SIZE:
        raise ProtocolError(f"stream ended inside a frame header ({len(header)} of {HEADER_SIZE} bytes)")
    magic, version, kind, round_, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if kind > TYPE_SHUTDOWN:
        raise ProtocolError(f"unknown message type {kind}")
    if length > max_payload:
        raise ProtocolError(f"payload of {length} bytes exceeds the {max_payload}-byte limit")
    payload = _read_exact(stream, length)
    if len(payload) < length:
        raise ProtocolError(f"stream ended inside a payload ({len(payload)} of {length} bytes)")
    return _decode(kind, round_, payload)


# --------------------------------------------------------------------------
# Socket round protocol
# --------------------------------------------------------------------------

def parse_address(address: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ProtocolError(f"address must look like host:port, got {address!r}")
    return host, int(port)


class _Peer:
    def __init__(self, sock: socket.socket, client_id: int):
        self.sock = sock
        self.reader = sock.makefile("rb")
        self.client_id = client_id
        self.alive = True

    def send(self, message: Message) -> None:
        self.sock.sendall(frame(message))

    def recv(self, max_payload: int) -> Message:
        return deframe(self.reader, max_payload)

    def close(self) -> None:
        self.alive = False
        for closer in (self.reader.close, self.sock.close):
            try:
                closer()
            except OSError:
                pass


@dataclass
class ServeResult:
    reports: list[RoundReport]
    global_values: list[np.ndarray]
    manifest: Manifest
    rounds_completed: int


def serve(address: str | tuple[str, int], n_clients: int, rounds: int, manifest: Manifest,
          initial_values: Sequence[np.ndarray], accept_timeout: float | None = 60.0,
          max_payload: int = DEFAULT_MAX_PAYLOAD,
          on_listening: Callable[[tuple[str, int]], None] | None = None,
          listener: socket.socket | None = None) -> ServeResult:
    """Run the synchronous FedAvg protocol for ``rounds`` rounds over TCP.

    Each round: GlobalModel(train) to every live client, await LocalUpdate or
    Skip from each, aggregate, then GlobalModel(evaluate) and collect metrics.
    A client whose connection drops is recorded as ``disconnected`` and left
    out of later rounds. Finally every live client receives Shutdown.
    """
    own_listener = listener is None
    if listener is None:
        listener = socket.create_server(parse_address(address))
    peers: list[_Peer] = []
    try:
        listener.settimeout(accept_timeout)
        if on_listening is not None:
            on_listening(listener.getsockname()[:2])
        while len(peers) < n_clients:
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                raise ProtocolError(f"only {len(peers)} of {n_clients} clients connected within {accept_timeout}s") from None
            sock.settimeout(None)
            peer = _Peer(sock, -1)
            msg = peer.recv(max_payload)
            if not isinstance(msg, JoinRequest):
                peer.close()
                raise ProtocolError(f"expected JoinRequest, got {type(msg).__name__}")
            if any(p.client_id == msg.client_id for p in peers):
                peer.close()
                log.warning("rejecting duplicate client id %d", msg.client_id)
                continue
            peer.client_id = msg.client_id
            peers.append(peer)
            log.info("client %d joined", msg.client_id)
        peers.sort(key=lambda p: p.client_id)

        global_values = [np.asarray(v, dtype=np.float64).copy() for v in initial_values]
        reports: list[RoundReport] = []
        completed = 0
        for r in range(1, rounds + 1):
            live = [p for p in peers if p.alive]
            replies = _exchange(live, GlobalModel(r, manifest, global_values, PHASE_TRAIN), r, max_payload)
            updates = [ClientUpdate(m.client_id, r, m.manifest, m.values, m.m)
                       for m in replies.values() if isinstance(m, LocalUpdate)]
            status = {p.client_id: _status(replies.get(p.client_id)) for p in peers}
            sizes = {cid: m.m for cid, m in replies.items() if isinstance(m, LocalUpdate)}
            if not updates:
                log.error("round %d aborted: every client skipped", r)
                break
            global_values = fedavg(updates)
            completed = r
            live = [p for p in peers if p.alive]
            evals = _exchange(live, GlobalModel(r, manifest, global_values, PHASE_EVALUATE), r, max_payload)
            metrics = []
            for p in peers:
                reply = evals.get(p.client_id)
                train_mse = test_mse = math.nan
                if isinstance(reply, LocalUpdate):
                    train_mse, test_mse = reply.train_mse, reply.test_mse
                    sizes.setdefault(p.client_id, reply.m)
                metrics.append(ClientMetrics(p.client_id, sizes.get(p.client_id, 0), train_mse, test_mse,
                                             status[p.client_id]))
            reports.append(make_report(r, "federated", metrics))
        for p in peers:
            if p.alive:
                try:
                    p.send(Shutdown())
                except OSError:
                    pass
        return ServeResult(reports, global_values, list(manifest), completed)
    finally:
        for p in peers:
            p.close()
        if own_listener:
            listener.close()


def _status(reply: Message | None) -> str:
    if isinstance(reply, LocalUpdate):
        return "ok"
    if isinstance(reply, Skip):
        return reply.reason
    return "disconnected"


def _exchange(peers: Sequence[_Peer], message: GlobalModel, round_: int, max_payload: int) -> dict[int, Message]:
    """Send ``message`` to every peer, then collect one reply from each (the round barrier)."""
    for p in peers:
        try:
            p.send(message)
        except OSError as exc:
            log.warning("client %d: send failed (%s); marking skipped", p.client_id, exc)
            p.close()
    replies: dict[int, Message] = {}
    for p in peers:
        if not p.alive:
            continue
        try:
            reply = p.recv(max_payload)
        except (OSError, EOFError, ProtocolError) as exc:
            log.warning("client %d: connection lost in round %d (%s)", p.client_id, round_, exc)
            p.close()
            continue
        if not isinstance(reply, (LocalUpdate, Skip)) or reply.client_id != p.client_id or reply.round != round_:
            log.warning("client %d: unexpected reply %s; dropping", p.client_id, type(reply).__name__)
            p.close()
            continue
        replies[p.client_id] = reply
    return replies


def connect(address: str | tuple[str, int], node: ClientNode, lr: float, batch_size: int,
            timeout: float = 10.0, max_payload: int = DEFAULT_MAX_PAYLOAD) -> int:
    """Client loop: join, answer GlobalModel frames, return 0 on Shutdown."""
    sock = socket.create_connection(parse_address(address), timeout=timeout)
    sock.settimeout(None)
    peer = _Peer(sock, node.client_id)
    try:
        peer.send(JoinRequest(node.client_id))
        while True:
            msg = peer.recv(max_payload)
            if isinstance(msg, Shutdown):
                return 0
            if not isinstance(msg, GlobalModel):
                raise ProtocolError(f"client {node.client_id}: unexpected {type(msg).__name__}")
            if msg.phase == PHASE_EVALUATE:
                train_mse, test_mse = node.evaluate(msg.values)
                peer.send(LocalUpdate(msg.round, node.client_id, node.m, train_mse=train_mse, test_mse=test_mse))
                continue
            result = node.local_train(msg.values, msg.round, lr, batch_size)
            if isinstance(result, ClientUpdate):
                peer.send(LocalUpdate(msg.round, node.client_id, result.m, result.manifest, result.values))
            else:
                peer.send(Skip(msg.round, node.client_id, result.reason))
    finally:
        peer.close()
