"""Binary wire protocol for distributed mode.

Frame layout::

    u32 length (payload bytes, little-endian) | u8 msg_type | payload

Payload fields are fixed-width little-endian: ``u32`` ids/rows/columns,
``u64`` clocks, ``f64`` values. Strings are ``u16`` byte length + UTF-8.
Variable-length lists carry a ``u32`` element count.

Two channel flavours share the codec: :class:`LoopbackChannel` (in-process
queues of encoded frames) and :class:`TcpChannel`.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple, Type

from .exceptions import ProtocolError

PROTOCOL_VERSION = 1
HEADER = struct.Struct("<IB")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 1 << 30

ROLE_WORKER, ROLE_SCHEDULER, ROLE_SERVER = 0, 1, 2
#: GET_REQ row value asking for every row the shard holds.
ALL_ROWS = 0xFFFFFFFF


@dataclass(frozen=True)
class GetReq:
    table: str
    row: int
    reader: int


@dataclass(frozen=True)
class GetResp:
    table: str
    row: int
    values: Tuple[float, ...]


@dataclass(frozen=True)
class Inc:
    table: str
    producer: int
    timestamp: int
    entries: Tuple[Tuple[int, int, float], ...]


@dataclass(frozen=True)
class Put:
    table: str
    row: int
    col: int
    value: float
    writer: int


@dataclass(frozen=True)
class ClockCommit:
    worker: int
    clock: int


@dataclass(frozen=True)
class Decision:
    clock: int
    assignments: Tuple[Tuple[int, Tuple[int, ...]], ...]


@dataclass(frozen=True)
class Partial:
    clock: int
    worker: int
    entries: Tuple[Tuple[int, float], ...]


@dataclass(frozen=True)
class PullDone:
    clock: int


@dataclass(frozen=True)
class Hello:
    version: int
    role: int
    node: int


@dataclass(frozen=True)
class Shutdown:
    pass


@dataclass(frozen=True)
class Error:
    message: str


CODES: Dict[Type, int] = {
    GetReq: 0x01, GetResp: 0x02, Inc: 0x03, Put: 0x04, ClockCommit: 0x05,
    Decision: 0x10, Partial: 0x11, PullDone: 0x12,
    Hello: 0x20, Shutdown: 0x21, Error: 0x2F,
}
TYPES = {code: cls for cls, code in CODES.items()}


class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v): self.parts.append(struct.pack("<B", v))
    def u16(self, v): self.parts.append(struct.pack("<H", v))
    def u32(self, v): self.parts.append(struct.pack("<I", v))
    def u64(self, v): self.parts.append(struct.pack("<Q", v))
    def f64(self, v): self.parts.append(struct.pack("<d", v))

    def string(self, s: str):
        raw = s.encode("utf-8")
        self.u16(len(raw))
        self.parts.append(raw)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, base: int):
        self.data = data
        self.pos = 0
        self.base = base  # offset of the payload inside the frame, for error reporting

    def _take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ProtocolError("truncated payload", self.base + self.pos)
        (value,) = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return value

    def u8(self): return self._take("<B")
    def u16(self): return self._take("<H")
    def u32(self): return self._take("<I")
    def u64(self): return self._take("<Q")
    def f64(self): return self._take("<d")

    def many(self, fmt: str, count: int) -> tuple:
        fmt = fmt.lstrip("<")
        size = struct.calcsize("<" + fmt) * count
        if self.pos + size > len(self.data):
            raise ProtocolError("truncated payload", self.base + self.pos)
        values = struct.unpack_from("<" + fmt * count, self.data, self.pos)
        self.pos += size
        return values

    def string(self) -> str:
        n = self.u16()
        if self.pos + n > len(self.data):
            raise ProtocolError("truncated string", self.base + self.pos)
        raw = self.data[self.pos:self.pos + n]
        start = self.pos
        self.pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("invalid UTF-8 string", self.base + start) from None

    def done(self):
        if self.pos != len(self.data):
            raise ProtocolError("trailing bytes in payload", self.base + self.pos)


def _encode_payload(msg, w: _Writer) -> None:
    if isinstance(msg, GetReq):
        w.string(msg.table); w.u32(msg.row); w.u32(msg.reader)
    elif isinstance(msg, GetResp):
        w.string(msg.table); w.u32(msg.row); w.u32(len(msg.values))
        w.parts.append(struct.pack(f"<{len(msg.values)}d", *msg.values))
    elif isinstance(msg, Inc):
        w.string(msg.table); w.u32(msg.producer); w.u64(msg.timestamp); w.u32(len(msg.entries))
        for row, col, delta in msg.entries:
            w.u32(row); w.u32(col); w.f64(delta)
    elif isinstance(msg, Put):
        w.string(msg.table); w.u32(msg.row); w.u32(msg.col); w.f64(msg.value); w.u32(msg.writer)
    elif isinstance(msg, ClockCommit):
        w.u32(msg.worker); w.u64(msg.clock)
    elif isinstance(msg, Decision):
        w.u64(msg.clock); w.u32(len(msg.assignments))
        for worker, idx in msg.assignments:
            w.u32(worker); w.u32(len(idx))
            w.parts.append(struct.pack(f"<{len(idx)}I", *idx))
    elif isinstance(msg, Partial):
        w.u64(msg.clock); w.u32(msg.worker); w.u32(len(msg.entries))
        for idx, value in msg.entries:
            w.u32(idx); w.f64(value)
    elif isinstance(msg, PullDone):
        w.u64(msg.clock)
    elif isinstance(msg, Hello):
        w.u8(msg.version); w.u8(msg.role); w.u32(msg.node)
    elif isinstance(msg, Shutdown):
        pass
    elif isinstance(msg, Error):
        w.string(msg.message)
    else:
        raise TypeError(f"not a protocol message: {msg!r}")


def encode(msg) -> bytes:
    """Encode one message as a complete frame."""
    w = _Writer()
    try:
        _encode_payload(msg, w)
    except struct.error as exc:
        raise ValueError(f"field out of range in {type(msg).__name__}: {exc}") from None
    payload = w.bytes()
    return HEADER.pack(len(payload), CODES[type(msg)]) + payload


def _decode_payload(code: int, r: _Reader):
    if code == 0x01:
        return GetReq(r.string(), r.u32(), r.u32())
    if code == 0x02:
        table, row, n = r.string(), r.u32(), r.u32()
        return GetResp(table, row, r.many("d", n))
    if code == 0x03:
        table, producer, ts, n = r.string(), r.u32(), r.u64(), r.u32()
        flat = r.many("IId", n)
        return Inc(table, producer, ts, tuple(zip(flat[0::3], flat[1::3], flat[2::3])))
    if code == 0x04:
        return Put(r.string(), r.u32(), r.u32(), r.f64(), r.u32())
    if code == 0x05:
        return ClockCommit(r.u32(), r.u64())
    if code == 0x10:
        clock, n = r.u64(), r.u32()
        assignments = []
        for _ in range(n):
            worker, k = r.u32(), r.u32()
            assignments.append((worker, r.many("I", k)))
        return Decision(clock, tuple(assignments))
    if code == 0x11:
        clock, worker, n = r.u64(), r.u32(), r.u32()
        flat = r.many("Id", n)
        return Partial(clock, worker, tuple(zip(flat[0::2], flat[1::2])))
    if code == 0x12:
        return PullDone(r.u64())
    if code == 0x20:
        return Hello(r.u8(), r.u8(), r.u32())
    if code == 0x21:
        return Shutdown()
    if code == 0x2F:
        return Error(r.string())
    raise AssertionError(code)


def decode(frame: bytes):
    """Decode exactly one complete frame."""
    frame = bytes(frame)
    if len(frame) < HEADER_SIZE:
        raise ProtocolError("truncated header", len(frame))
    length, code = HEADER.unpack_from(frame, 0)
    if code not in TYPES:
        raise ProtocolError(f"unknown msg_type 0x{code:02x}", 4)
    actual = len(frame) - HEADER_SIZE
    if actual < length:
        raise ProtocolError(f"frame declares {length} payload bytes but carries {actual}", len(frame))
    if actual > length:
        raise ProtocolError(f"frame declares {length} payload bytes but carries {actual}",
                            HEADER_SIZE + length)
    r = _Reader(frame[HEADER_SIZE:], HEADER_SIZE)
    msg = _decode_payload(code, r)
    r.done()
    return msg


def read_frame(recv_exact: Callable[[int], bytes]) -> bytes:
    header = recv_exact(HEADER_SIZE)
    length, code = HEADER.unpack(header)
    if code not in TYPES:
        raise ProtocolError(f"unknown msg_type 0x{code:02x}", 4)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds limit", 0)
    return header + recv_exact(length)


# ----------------------------------------------------------------- channels
class ChannelClosed(ConnectionError):
    pass


class Channel:
    """Bidirectional, FIFO, single-writer message pipe."""

    def __init__(self, record: bool = False):
        self.record = record
        self.sent: list = []
        self._send_lock = threading.Lock()

    def send(self, msg) -> None:
        frame = encode(msg)
        with self._send_lock:
            if self.record:
                self.sent.append(frame)
            self._send_frame(frame)

    def recv(self, timeout: Optional[float] = None):
        return decode(self._recv_frame(timeout))

    def request(self, msg, timeout: Optional[float] = None):
        self.send(msg)
        return self.recv(timeout)

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self, timeout: Optional[float]) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


_EOF = object()


class LoopbackChannel(Channel):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, record: bool = False):
        super().__init__(record)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    @classmethod
    def pair(cls, record: bool = False) -> Tuple["LoopbackChannel", "LoopbackChannel"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b, record), cls(b, a, record)

    def _send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise ChannelClosed("channel closed")
        self._outbox.put(frame)

    def _recv_frame(self, timeout):
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no frame received") from None
        if item is _EOF:
            self._inbox.put(_EOF)
            raise ChannelClosed("peer closed")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_EOF)
            self._inbox.put(_EOF)


class TcpChannel(Channel):
    def __init__(self, sock: socket.socket, record: bool = False):
        super().__init__(record)
        self.sock = sock
        self._buf = bytearray()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send_frame(self, frame: bytes) -> None:
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise ChannelClosed(str(exc)) from None

    def _fill(self) -> None:
        try:
            chunk = self.sock.recv(1 << 16)
        except socket.timeout:
            raise TimeoutError("no frame received") from None
        except OSError as exc:
            raise ChannelClosed(str(exc)) from None
        if not chunk:
            raise ChannelClosed("peer closed")
        self._buf += chunk

    def _recv_frame(self, timeout):
        # bytes stay buffered across timeouts, so a frame split by a timeout is never lost
        self.sock.settimeout(timeout)
        while True:
            if len(self._buf) >= HEADER_SIZE:
                length, code = HEADER.unpack_from(self._buf, 0)
                if code not in TYPES:
                    raise ProtocolError(f"unknown msg_type 0x{code:02x}", 4)
                if length > MAX_PAYLOAD:
                    raise ProtocolError(f"frame length {length} exceeds limit", 0)
                end = HEADER_SIZE + length
                if len(self._buf) >= end:
                    frame = bytes(self._buf[:end])
                    del self._buf[:end]
                    return frame
            self._fill()

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def tcp_connect(host: str, port: int, record: bool = False, timeout: float = 10.0) -> TcpChannel:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return TcpChannel(sock, record)


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, record: bool = False):
        self.sock = socket.create_server((host, port))
        self.record = record

    @property
    def address(self) -> Tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self, timeout: Optional[float] = None) -> TcpChannel:
        self.sock.settimeout(timeout)
        conn, _ = self.sock.accept()
        conn.settimeout(None)
        return TcpChannel(conn, self.record)

    def close(self) -> None:
        self.sock.close()
