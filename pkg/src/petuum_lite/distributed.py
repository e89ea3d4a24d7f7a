"""Distributed mode: server shards, workers and the scheduler talk over the wire protocol.

All nodes run as threads of one process (desk scale); every byte still goes
through :mod:`petuum_lite.transport`, over TCP on 127.0.0.1 or over loopback
queues. The server side reuses :class:`~petuum_lite.param_server.ServerShard`,
so semantics match in-process mode exactly.
"""
from __future__ import annotations

import logging
import threading
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import exceptions
from .exceptions import PetuumError, ProtocolError, ServerShutdown, UsageError
from .param_server import AGGREGATOR, INC, INC_ROW, PUT, ParamServer, ServerShard, TableSpec, WriteBuffer
from .transport import (
    ALL_ROWS, PROTOCOL_VERSION, ROLE_SCHEDULER, ROLE_SERVER, ROLE_WORKER,
    Channel, ChannelClosed, ClockCommit, Error, GetReq, GetResp, Hello, Inc,
    LoopbackChannel, Put, Shutdown, TcpListener, tcp_connect,
)

log = logging.getLogger(__name__)

TRANSPORTS = ("tcp", "loopback")


def _error_for(exc: Exception) -> Error:
    return Error(f"{type(exc).__name__}: {exc}")


def _raise_remote(err: Error):
    name, _, text = err.message.partition(": ")
    cls = getattr(exceptions, name, None)
    if cls in (exceptions.UsageError, exceptions.ContractViolation,
               exceptions.ServerShutdown, exceptions.RunAborted):
        raise cls(text)
    if name in ("TimeoutError", "ValueError"):
        raise {"TimeoutError": TimeoutError, "ValueError": ValueError}[name](text)
    raise PetuumError(err.message)


def _rows_on(n_rows: int, shard: int, n_shards: int) -> List[int]:
    return list(range(shard, n_rows, n_shards))


class ShardServer:
    """Serves one :class:`ServerShard`; one handler loop per client connection."""

    def __init__(self, shard: ServerShard, read_timeout: Optional[float] = None):
        self.shard = shard
        self.read_timeout = read_timeout

    def serve(self, channel: Channel, on_hello=None) -> None:
        pending: List[tuple] = []
        error: Optional[str] = None
        try:
            while True:
                try:
                    msg = channel.recv()
                except ChannelClosed:
                    return
                if isinstance(msg, Hello):
                    if msg.version != PROTOCOL_VERSION:
                        channel.send(Error(f"ProtocolError: unsupported protocol version {msg.version}"))
                        return
                    if on_hello is not None:
                        on_hello(msg, channel)
                    channel.send(Hello(PROTOCOL_VERSION, ROLE_SERVER, self.shard.shard_id))
                elif isinstance(msg, GetReq):
                    channel.send(self._get(msg))
                elif isinstance(msg, Inc):
                    if (msg.producer != AGGREGATOR
                            and msg.timestamp != self.shard.reader_clock(msg.producer)):
                        error = (f"UsageError: INC stamped {msg.timestamp} but worker "
                                 f"{msg.producer} is at clock {self.shard.reader_clock(msg.producer)}")
                    pending.extend((msg.table, r, INC, c, v) for r, c, v in msg.entries)
                elif isinstance(msg, Put):
                    pending.append((msg.table, msg.row, PUT, msg.col, msg.value))
                elif isinstance(msg, ClockCommit):
                    ops, pending = pending, []
                    if error is not None:
                        channel.send(Error(error))
                        error = None
                        continue
                    try:
                        if msg.worker == AGGREGATOR:
                            self.shard.barrier_commit(ops, msg.clock)
                        else:
                            self.shard.commit(msg.worker, ops, msg.clock)
                    except (PetuumError, ValueError) as exc:
                        channel.send(_error_for(exc))
                        continue
                    channel.send(msg)
                elif isinstance(msg, Shutdown):
                    return
                else:
                    channel.send(Error(f"ProtocolError: unexpected {type(msg).__name__} on a server connection"))
        except ChannelClosed:
            return
        except ProtocolError as exc:
            log.warning("shard %d: dropping connection: %s", self.shard.shard_id, exc)
        finally:
            channel.close()

    def _get(self, msg: GetReq):
        rows = None if msg.row == ALL_ROWS else [msg.row]
        try:
            got = self.shard.read(msg.table, rows, msg.reader, timeout=self.read_timeout)
        except (PetuumError, TimeoutError, ValueError) as exc:
            return _error_for(exc)
        if not got:
            values: Tuple[float, ...] = ()
        else:
            values = tuple(np.concatenate([got[r] for r in sorted(got)]).tolist())
        return GetResp(msg.table, msg.row, values)


class RemoteClient:
    """A worker's (or the aggregator's) handle on sharded servers, over channels.

    Buffers writes locally (read-my-writes overlay) and flushes them as INC/PUT
    messages ahead of CLOCK_COMMIT.
    """

    def __init__(self, worker: int, channels: List[Channel], specs: Dict[str, TableSpec]):
        self.worker = worker
        self.channels = channels
        self.specs = dict(specs)
        self.n_shards = len(channels)
        self._clock = 0
        self._buffer = WriteBuffer()
        self._grants: set = set()
        for ch in channels:
            reply = ch.request(Hello(PROTOCOL_VERSION, ROLE_WORKER, worker))
            self._check(reply, Hello)

    @staticmethod
    def _check(reply, expected):
        if isinstance(reply, Error):
            _raise_remote(reply)
        if not isinstance(reply, expected):
            raise ProtocolError(f"expected {expected.__name__}, got {type(reply).__name__}", 0)
        return reply

    def _spec(self, table: str) -> TableSpec:
        try:
            return self.specs[table]
        except KeyError:
            raise UsageError(f"unknown table {table!r}") from None

    def _check_cell(self, table, row, col=None) -> TableSpec:
        spec = self._spec(table)
        if not 0 <= row < spec.n_rows:
            raise UsageError(f"row {row} out of range for table {table!r}")
        if col is not None and not 0 <= col < spec.row_width:
            raise UsageError(f"column {col} out of range for table {table!r}")
        return spec

    @property
    def clock(self) -> int:
        return self._clock

    def get(self, table: str, row: int) -> np.ndarray:
        self._check_cell(table, row)
        resp = self._check(self.channels[row % self.n_shards].request(GetReq(table, row, self.worker)), GetResp)
        return self._buffer.overlay(table, row, np.array(resp.values, dtype=np.float64))

    def get_table(self, table: str) -> np.ndarray:
        spec = self._spec(table)
        out = np.empty((spec.n_rows, spec.row_width))
        for ch in self.channels:
            ch.send(GetReq(table, ALL_ROWS, self.worker))
        for i, ch in enumerate(self.channels):
            resp = self._check(ch.recv(), GetResp)
            rows = _rows_on(spec.n_rows, i, self.n_shards)
            if rows:
                out[rows] = np.array(resp.values, dtype=np.float64).reshape(len(rows), spec.row_width)
        for r in range(spec.n_rows):
            out[r] = self._buffer.overlay(table, r, out[r])
        return out

    def inc(self, table: str, row: int, col: int, delta: float) -> None:
        self._check_cell(table, row, col)
        self._buffer.inc(table, row, col, delta)

    def inc_row(self, table: str, row: int, delta) -> None:
        spec = self._check_cell(table, row)
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (spec.row_width,):
            raise UsageError(f"row delta must have shape ({spec.row_width},)")
        self._buffer.inc_row(table, row, delta)

    def grant_put(self, table: str, cells) -> None:
        for row, col in cells:
            self._check_cell(table, row, col)
            self._grants.add((table, row, col))

    def put(self, table: str, row: int, col: int, value: float) -> None:
        self._check_cell(table, row, col)
        if self.worker != AGGREGATOR and (table, row, col) not in self._grants:
            raise exceptions.ContractViolation(
                f"worker {self.worker} has no overwrite right for {table}[{row},{col}] this clock")
        self._buffer.put(table, row, col, value)

    def _flush(self, stamp: int) -> None:
        per_shard: List[list] = [[] for _ in self.channels]
        for op in self._buffer.drain():
            per_shard[op[1] % self.n_shards].append(op)
        for ch, ops in zip(self.channels, per_shard):
            run_table, entries = None, []

            def flush_incs():
                if entries:
                    ch.send(Inc(run_table, self.worker, stamp, tuple(entries)))
                    entries.clear()

            for table, row, kind, col, value in ops:
                if kind == PUT:
                    flush_incs()
                    ch.send(Put(table, row, col, value, self.worker))
                    continue
                if table != run_table:
                    flush_incs()
                    run_table = table
                if kind == INC:
                    entries.append((row, col, value))
                else:
                    entries.extend((row, c, float(v)) for c, v in enumerate(value))
            flush_incs()

    def _commit_all(self, msg: ClockCommit) -> None:
        for ch in self.channels:
            ch.send(msg)
        errors = []
        for ch in self.channels:
            reply = ch.recv()
            if isinstance(reply, Error):
                errors.append(reply)
            elif reply != msg:
                raise ProtocolError(f"commit not acknowledged: {reply!r}", 0)
        if errors:
            _raise_remote(errors[0])

    def commit(self) -> int:
        if self.worker == AGGREGATOR:
            raise UsageError("the aggregator publishes with barrier()")
        ts = self._clock
        self._flush(ts)
        self._commit_all(ClockCommit(self.worker, ts))
        self._grants.clear()
        self._clock += 1
        return ts

    def barrier(self, clock: int) -> None:
        if self.worker != AGGREGATOR:
            raise UsageError("only the aggregator issues barrier commits")
        self._flush(clock)
        self._commit_all(ClockCommit(AGGREGATOR, clock))

    def close(self) -> None:
        for ch in self.channels:
            try:
                ch.send(Shutdown())
            except ChannelClosed:
                pass
            ch.close()


class Cluster:
    """Serves the shards of ``ps`` as network nodes and hands out connected clients.

    ``transport="tcp"`` uses real sockets on 127.0.0.1; ``"loopback"`` uses
    in-memory queues. Both carry identical encoded frames; with ``record=True``
    every channel keeps the frames it sent, keyed by endpoint in :attr:`logs`.
    """

    def __init__(self, ps: ParamServer, transport: str = "tcp", record: bool = False,
                 host: str = "127.0.0.1", read_timeout: Optional[float] = None):
        if transport not in TRANSPORTS:
            raise UsageError(f"transport must be one of {TRANSPORTS}")
        self.ps = ps
        self.transport = transport
        self.record = record
        self.host = host
        self.servers = [ShardServer(s, read_timeout) for s in ps.shards]
        self.logs: Dict[tuple, Channel] = {}
        self._threads: List[threading.Thread] = []
        self._clients: List[RemoteClient] = []
        self._listeners: List[TcpListener] = []
        self._sched_listener: Optional[TcpListener] = None
        self._closed = False
        self._lock = threading.Lock()
        if transport == "tcp":
            for i, server in enumerate(self.servers):
                lst = TcpListener(host, 0, record)
                self._listeners.append(lst)
                self._spawn(self._accept_loop, lst, server, i)
            self._sched_listener = TcpListener(host, 0, record)

    def _spawn(self, fn, *args) -> threading.Thread:
        t = threading.Thread(target=fn, args=args, daemon=True)
        t.start()
        self._threads.append(t)
        return t

    def _register(self, key: tuple, ch: Channel) -> None:
        with self._lock:
            self.logs[key] = ch

    def _accept_loop(self, lst: TcpListener, server: ShardServer, shard: int) -> None:
        while not self._closed:
            try:
                ch = lst.accept(timeout=0.05)
            except TimeoutError:
                continue
            except OSError:
                return
            hello = lambda msg, c, shard=shard: self._register(("shard", shard, "node", msg.node), c)
            self._spawn(server.serve, ch, hello)

    def _shard_channels(self, node: int) -> List[Channel]:
        chans = []
        for i, server in enumerate(self.servers):
            if self.transport == "tcp":
                ch = tcp_connect(*self._listeners[i].address, record=self.record)
            else:
                ch, far = LoopbackChannel.pair(record=self.record)
                hello = lambda msg, c, i=i: self._register(("shard", i, "node", msg.node), c)
                self._spawn(server.serve, far, hello)
            self._register(("node", node, "shard", i), ch)
            chans.append(ch)
        return chans

    def client(self, worker: int) -> RemoteClient:
        c = RemoteClient(worker, self._shard_channels(worker), self.ps.tables)
        self._clients.append(c)
        return c

    def control_pair(self, worker: int) -> Tuple[Channel, Channel]:
        """(scheduler end, worker end) of the scheduling control channel for ``worker``."""
        if self.transport == "tcp":
            worker_end = tcp_connect(*self._sched_listener.address, record=self.record)
            sched_end = self._sched_listener.accept(timeout=10.0)
        else:
            sched_end, worker_end = LoopbackChannel.pair(record=self.record)
        worker_end.send(Hello(PROTOCOL_VERSION, ROLE_WORKER, worker))
        hello = sched_end.recv(timeout=10.0)
        if not isinstance(hello, Hello) or hello.version != PROTOCOL_VERSION:
            raise ProtocolError(f"bad scheduler handshake: {hello!r}", 0)
        sched_end.send(Hello(PROTOCOL_VERSION, ROLE_SCHEDULER, 0))
        worker_end.recv(timeout=10.0)
        self._register(("scheduler", "node", worker), sched_end)
        self._register(("node", worker, "scheduler"), worker_end)
        return sched_end, worker_end

    def frames(self) -> Dict[tuple, List[bytes]]:
        """Frames sent per endpoint (only populated with ``record=True``)."""
        return {k: list(ch.sent) for k, ch in self.logs.items()}

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for c in self._clients:
            try:
                c.close()
            except (PetuumError, OSError):
                pass
        for lst in self._listeners:
            lst.close()
        if self._sched_listener is not None:
            self._sched_listener.close()
        for t in self._threads:
            t.join(timeout=2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
