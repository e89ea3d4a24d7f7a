"""SSP parameter server: named tables of dense float64 rows.

Layout
------
Rows are placed on shards by ``row_id % n_shards``. Each :class:`ServerShard`
keeps a folded ``base`` per row plus a log of committed batches that some
reader may still need to exclude. Batches are applied in the canonical order
``(timestamp, producer)``; that makes every read deterministic once the SSP
gate has admitted it with ``s = 0`` even though workers commit from different
threads.

Read views
----------
A worker executing clock ``c`` sees

* its own committed and still-buffered writes (read-my-writes),
* every other producer's batch stamped ``<= c - 1`` that has been committed
  (``read_policy="fresh"``) or only those stamped ``<= c - s - 1``
  (``read_policy="bounded"``),
* aggregator (barrier) batches stamped ``<= c - 1``.

The gate guarantees that every batch stamped ``<= c - s - 1`` exists before
the read is served, so a view is never staler than the bound.
"""
from __future__ import annotations

import bisect
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .consistency import NOT_STARTED, VectorClock, check_staleness, ssp_read_permitted
from .exceptions import ContractViolation, ServerShutdown, UsageError

#: Producer id used by the central ``pull()`` aggregator.
AGGREGATOR = 0xFFFFFFFF

READ_POLICIES = ("fresh", "bounded")

INC, INC_ROW, PUT = "inc", "inc_row", "put"


@dataclass(frozen=True)
class TableSpec:
    name: str
    n_rows: int
    row_width: int
    init: Optional[np.ndarray] = None

    def initial_rows(self) -> np.ndarray:
        if self.init is None:
            return np.zeros((self.n_rows, self.row_width))
        init = np.array(self.init, dtype=np.float64).reshape(self.n_rows, self.row_width)
        return init


@dataclass(frozen=True)
class UpdateBatch:
    """Additive deltas produced by one worker at one clock."""

    table: str
    entries: Tuple[Tuple[int, int, float], ...]
    producer: int
    timestamp: int


def _apply_op(vec: np.ndarray, kind: str, col, value) -> None:
    if kind == INC:
        vec[col] += value
    elif kind == INC_ROW:
        vec += value
    else:
        vec[col] = value


class WriteBuffer:
    """Single-owner, program-ordered buffer of uncommitted writes."""

    def __init__(self):
        self.ops: List[tuple] = []

    def inc(self, table: str, row: int, col: int, delta: float) -> None:
        self.ops.append((table, row, INC, col, float(delta)))

    def inc_row(self, table: str, row: int, delta: np.ndarray) -> None:
        self.ops.append((table, row, INC_ROW, None, np.array(delta, dtype=np.float64)))

    def put(self, table: str, row: int, col: int, value: float) -> None:
        self.ops.append((table, row, PUT, col, float(value)))

    def overlay(self, table: str, row: int, vec: np.ndarray) -> np.ndarray:
        for t, r, kind, col, value in self.ops:
            if t == table and r == row:
                _apply_op(vec, kind, col, value)
        return vec

    def drain(self) -> List[tuple]:
        ops, self.ops = self.ops, []
        return ops

    def __len__(self):
        return len(self.ops)


@dataclass
class _Batch:
    ts: int
    producer: int
    seq: int
    barrier: bool
    rows: Dict[Tuple[str, int], list] = field(default_factory=dict)

    @property
    def key(self):
        return (self.ts, self.producer, self.seq)


@dataclass
class ClockSnapshot:
    """State of a shard after every update stamped ``<= clock`` was applied."""

    clock: int
    rows: Dict[str, Dict[int, np.ndarray]]
    staleness: List[int]


class ServerShard:
    """One server shard. Thread-safe; reads block on the SSP gate."""

    def __init__(self, workers: Iterable[int], staleness: int = 0,
                 read_policy: str = "fresh", shard_id: int = 0):
        if read_policy not in READ_POLICIES:
            raise UsageError(f"read_policy must be one of {READ_POLICIES}")
        self.shard_id = shard_id
        self.staleness = check_staleness(staleness)
        self.read_policy = read_policy
        self._cond = threading.Condition()
        self._vc = VectorClock.start(workers)
        if not len(self._vc):
            raise UsageError("a server needs at least one worker")
        self._widths: Dict[str, int] = {}
        self._n_rows: Dict[str, int] = {}
        self._base: Dict[str, Dict[int, np.ndarray]] = {}
        self._log: List[_Batch] = []
        self._seq = itertools.count()
        self._put_owner: Dict[Tuple[str, int, int, int], int] = {}
        self._pending_staleness: Dict[int, List[int]] = {}
        self._all_staleness: List[int] = []
        self._listeners: List[Callable[[int, ClockSnapshot], None]] = []
        self._closed = False

    # ------------------------------------------------------------------ setup
    def create_table(self, name: str, n_rows: int, row_width: int, rows: Dict[int, np.ndarray]):
        with self._cond:
            if name in self._widths:
                raise UsageError(f"table {name!r} already exists")
            if row_width <= 0:
                raise UsageError("row_width must be positive")
            self._widths[name] = row_width
            self._n_rows[name] = n_rows
            self._base[name] = {r: np.array(v, dtype=np.float64) for r, v in rows.items()}

    def add_listener(self, fn: Callable[[int, ClockSnapshot], None]) -> None:
        self._listeners.append(fn)

    @property
    def vector_clock(self) -> VectorClock:
        with self._cond:
            return self._vc

    # ------------------------------------------------------------------ reads
    def _check_row(self, table: str, row: int):
        if table not in self._base:
            raise UsageError(f"unknown table {table!r}")
        if row not in self._base[table]:
            raise UsageError(f"row {row} of table {table!r} is not on shard {self.shard_id}")

    def _visible(self, batch: _Batch, reader: int, clock: int) -> bool:
        if reader == AGGREGATOR or batch.producer == reader:
            return True
        if batch.barrier or self.read_policy == "fresh":
            return batch.ts <= clock - 1
        return batch.ts <= clock - self.staleness - 1

    def _view(self, table: str, row: int, reader: int, clock: int) -> np.ndarray:
        vec = self._base[table][row].copy()
        key = (table, row)
        for batch in self._log:
            ops = batch.rows.get(key)
            if ops and self._visible(batch, reader, clock):
                for kind, col, value in ops:
                    _apply_op(vec, kind, col, value)
        return vec

    def reader_clock(self, reader: int) -> int:
        with self._cond:
            return self._vc[reader] + 1

    def read_permitted(self, reader: int) -> bool:
        with self._cond:
            if reader == AGGREGATOR:
                return True
            return ssp_read_permitted(self._vc[reader] + 1, self.staleness, self._vc)

    def read(self, table: str, rows: Optional[Sequence[int]], reader: int,
             timeout: Optional[float] = None) -> Dict[int, np.ndarray]:
        """Serve a gated read of ``rows`` (all rows on this shard if None)."""
        with self._cond:
            if table not in self._base:
                raise UsageError(f"unknown table {table!r}")
            if rows is None:
                rows = sorted(self._base[table])
            for r in rows:
                self._check_row(table, r)
            if reader == AGGREGATOR:
                clock = None
            else:
                clock = self._vc[reader] + 1

                def ready():
                    return self._closed or ssp_read_permitted(clock, self.staleness, self._vc)

                if not self._cond.wait_for(ready, timeout=timeout):
                    raise TimeoutError(f"SSP read by worker {reader} at clock {clock} timed out")
            if self._closed:
                raise ServerShutdown("server shut down while a read was pending")
            if clock is None:
                return {r: self._view(table, r, reader, 0) for r in rows}
            out = {r: self._view(table, r, reader, clock) for r in rows}
            self._record_staleness(reader, clock)
            return out

    def _record_staleness(self, reader: int, clock: int) -> None:
        others = [c for w, c in self._vc.entries.items() if w != reader]
        if not others:
            observed = 0
        else:
            if self.read_policy == "fresh":
                through = min(clock - 1, min(others))
            else:
                through = clock - self.staleness - 1
            observed = max(0, clock - 1 - max(through, NOT_STARTED))
        self._pending_staleness.setdefault(clock, []).append(observed)
        self._all_staleness.append(observed)

    def staleness_samples(self) -> List[int]:
        with self._cond:
            return list(self._all_staleness)

    # ---------------------------------------------------------------- commits
    def _make_batch(self, ops: Sequence[tuple], producer: int, ts: int, barrier: bool) -> _Batch:
        batch = _Batch(ts=ts, producer=producer, seq=next(self._seq), barrier=barrier)
        puts = {}
        for table, row, kind, col, value in ops:
            self._check_row(table, row)
            width = self._widths[table]
            if kind == INC_ROW:
                if np.shape(value) != (width,):
                    raise UsageError(f"row delta for {table!r} must have length {width}")
            elif not 0 <= col < width:
                raise UsageError(f"column {col} out of range for table {table!r}")
            if kind == PUT:
                cell = (table, row, col, ts)
                owner = self._put_owner.get(cell)
                if owner is not None and owner != producer:
                    raise ContractViolation(
                        f"conflicting put to {table}[{row},{col}] at clock {ts} "
                        f"by writers {owner} and {producer}")
                puts[cell] = producer
            batch.rows.setdefault((table, row), []).append((kind, col, value))
        self._put_owner.update(puts)
        return batch

    def commit(self, worker: int, ops: Sequence[tuple], clock: Optional[int] = None) -> int:
        """Publish ``ops`` stamped with the worker's current clock and tick it.

        Returns the timestamp used.
        """
        snapshots = []
        with self._cond:
            if self._closed:
                raise ServerShutdown("server is shut down")
            ts = self._vc[worker] + 1
            if clock is not None and clock != ts:
                raise UsageError(f"worker {worker} committing clock {clock} but is at {ts}")
            batch = self._make_batch(ops, worker, ts, barrier=False)
            old_min = self._vc.min()
            if batch.rows:
                self._insert(batch)
            self._vc = self._vc.tick(worker)
            new_min = self._vc.min()
            if new_min > old_min:
                self._fold()
                self._prune_put_owners(new_min)
                if self._listeners:
                    snapshots.append(self._snapshot(new_min))
            self._cond.notify_all()
        for snap in snapshots:
            for fn in self._listeners:
                fn(self.shard_id, snap)
        return ts

    def barrier_commit(self, ops: Sequence[tuple], clock: int) -> None:
        """Publish aggregator writes for ``clock``; visible to every reader at ``clock + 1``."""
        with self._cond:
            if self._closed:
                raise ServerShutdown("server is shut down")
            if clock <= self._vc.min():
                raise UsageError(f"barrier for clock {clock} arrived after every worker committed it")
            batch = self._make_batch(ops, AGGREGATOR, clock, barrier=True)
            if batch.rows:
                self._insert(batch)
            self._cond.notify_all()

    def _insert(self, batch: _Batch) -> None:
        keys = [b.key for b in self._log]
        self._log.insert(bisect.bisect(keys, batch.key), batch)

    def _foldable(self, batch: _Batch, min_c: int) -> bool:
        if batch.barrier or self.read_policy == "fresh":
            return batch.ts <= min_c
        return batch.ts <= min_c - self.staleness

    def _fold(self) -> None:
        min_c = self._vc.min()
        n = 0
        for batch in self._log:
            if not self._foldable(batch, min_c):
                break
            for (table, row), ops in batch.rows.items():
                vec = self._base[table][row]
                for kind, col, value in ops:
                    _apply_op(vec, kind, col, value)
            n += 1
        if n:
            del self._log[:n]

    def _prune_put_owners(self, min_c: int) -> None:
        stale = [cell for cell in self._put_owner if cell[3] < min_c]
        for cell in stale:
            del self._put_owner[cell]

    def _snapshot(self, clock: int) -> ClockSnapshot:
        rows = {t: {r: v.copy() for r, v in rs.items()} for t, rs in self._base.items()}
        for batch in self._log:
            if batch.ts > clock:
                continue
            for (table, row), ops in batch.rows.items():
                vec = rows[table][row]
                for kind, col, value in ops:
                    _apply_op(vec, kind, col, value)
        samples = self._pending_staleness.pop(clock, [])
        return ClockSnapshot(clock=clock, rows=rows, staleness=samples)

    def latest(self) -> Dict[str, Dict[int, np.ndarray]]:
        """Everything committed so far, regardless of clocks."""
        with self._cond:
            return {t: {r: self._view(t, r, AGGREGATOR, 0) for r in rs}
                    for t, rs in self._base.items()}

    def shutdown(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed


def _shard_rows(spec: TableSpec, shard: int, n_shards: int) -> Dict[int, np.ndarray]:
    init = spec.initial_rows()
    return {r: init[r] for r in range(spec.n_rows) if r % n_shards == shard}


class ParamServer:
    """In-process parameter server: shards plus per-worker write buffers.

    Mirrors the ``PS`` object of a Petuum program: ``get``/``inc``/``put`` and
    ``clock_commit``. Worker ids are ``0..n_workers-1``; the central aggregator
    writes with ``writer=AGGREGATOR`` and publishes with :meth:`barrier_commit`.
    """

    def __init__(self, n_workers: int, staleness: int = 0, n_shards: int = 1,
                 read_policy: str = "fresh", tables: Iterable[TableSpec] = ()):
        if n_workers < 1:
            raise UsageError("need at least one worker")
        if n_shards < 1:
            raise UsageError("need at least one shard")
        self.n_workers = n_workers
        self.staleness = check_staleness(staleness)
        self.n_shards = n_shards
        self.shards = [ServerShard(range(n_workers), staleness, read_policy, shard_id=i)
                       for i in range(n_shards)]
        self._specs: Dict[str, TableSpec] = {}
        self._buffers = {w: WriteBuffer() for w in list(range(n_workers)) + [AGGREGATOR]}
        self._grants: Dict[int, set] = {w: set() for w in range(n_workers)}
        self._commit_lock = threading.Lock()
        self._assembly = _SnapshotAssembler(self)
        for spec in tables:
            self.create_table(spec)

    # ------------------------------------------------------------------ tables
    def create_table(self, spec: TableSpec) -> None:
        if spec.name in self._specs:
            raise UsageError(f"table {spec.name!r} already exists")
        self._specs[spec.name] = spec
        for i, shard in enumerate(self.shards):
            shard.create_table(spec.name, spec.n_rows, spec.row_width,
                               _shard_rows(spec, i, self.n_shards))

    @property
    def tables(self) -> Dict[str, TableSpec]:
        return dict(self._specs)

    def shard_of(self, row: int) -> ServerShard:
        return self.shards[row % self.n_shards]

    def _spec(self, table: str) -> TableSpec:
        try:
            return self._specs[table]
        except KeyError:
            raise UsageError(f"unknown table {table!r}") from None

    def _check_cell(self, table: str, row: int, col: Optional[int] = None) -> TableSpec:
        spec = self._spec(table)
        if not 0 <= row < spec.n_rows:
            raise UsageError(f"row {row} out of range for table {table!r}")
        if col is not None and not 0 <= col < spec.row_width:
            raise UsageError(f"column {col} out of range for table {table!r}")
        return spec

    def _check_worker(self, worker: int) -> None:
        if worker != AGGREGATOR and not 0 <= worker < self.n_workers:
            raise UsageError(f"unknown worker {worker}")

    # ------------------------------------------------------------------- clock
    @property
    def vector_clock(self) -> VectorClock:
        return self.shards[0].vector_clock

    def worker_clock(self, worker: int) -> int:
        """The clock ``worker`` is currently executing."""
        self._check_worker(worker)
        return self.shards[0].reader_clock(worker)

    def read_permitted(self, worker: int) -> bool:
        return all(s.read_permitted(worker) for s in self.shards)

    # ------------------------------------------------------------------- reads
    def get(self, table: str, row: int, reader: int, timeout: Optional[float] = None) -> np.ndarray:
        self._check_cell(table, row)
        self._check_worker(reader)
        vec = self.shard_of(row).read(table, [row], reader, timeout)[row]
        return self._buffers[reader].overlay(table, row, vec)

    def get_table(self, table: str, reader: int, timeout: Optional[float] = None) -> np.ndarray:
        spec = self._spec(table)
        self._check_worker(reader)
        out = np.empty((spec.n_rows, spec.row_width))
        for shard in self.shards:
            for r, vec in shard.read(table, None, reader, timeout).items():
                out[r] = self._buffers[reader].overlay(table, r, vec)
        return out

    # ------------------------------------------------------------------ writes
    def inc(self, table: str, batch: UpdateBatch) -> None:
        if batch.table != table:
            raise UsageError("batch table does not match")
        self._check_worker(batch.producer)
        if batch.producer != AGGREGATOR:
            current = self.worker_clock(batch.producer)
            if batch.timestamp != current:
                raise UsageError(f"batch stamped {batch.timestamp} but producer is at clock {current}")
        for row, col, _ in batch.entries:
            self._check_cell(table, row, col)
        buf = self._buffers[batch.producer]
        for row, col, delta in batch.entries:
            buf.inc(table, row, col, delta)

    def inc_row(self, table: str, row: int, delta, producer: int) -> None:
        spec = self._check_cell(table, row)
        self._check_worker(producer)
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (spec.row_width,):
            raise UsageError(f"row delta must have shape ({spec.row_width},)")
        self._buffers[producer].inc_row(table, row, delta)

    def grant_put(self, writer: int, table: str, cells: Iterable[Tuple[int, int]]) -> None:
        """Give a worker the overwrite right for ``cells`` during its current clock."""
        self._check_worker(writer)
        for row, col in cells:
            self._check_cell(table, row, col)
            self._grants[writer].add((table, row, col))

    def put(self, table: str, row: int, col: int, value: float, writer: int) -> None:
        self._check_cell(table, row, col)
        self._check_worker(writer)
        if writer != AGGREGATOR and (table, row, col) not in self._grants[writer]:
            raise ContractViolation(
                f"worker {writer} has no overwrite right for {table}[{row},{col}] this clock")
        self._buffers[writer].put(table, row, col, value)

    def clock_commit(self, worker: int) -> int:
        """Publish the worker's buffered writes and tick its clock. Returns the clock committed."""
        if worker == AGGREGATOR:
            raise UsageError("the aggregator publishes with barrier_commit")
        self._check_worker(worker)
        ops = self._buffers[worker].drain()
        by_shard = self._split(ops)
        with self._commit_lock:
            ts = None
            for i, shard in enumerate(self.shards):
                ts = shard.commit(worker, by_shard[i])
        self._grants[worker].clear()
        return ts

    def barrier_commit(self, clock: int) -> None:
        ops = self._buffers[AGGREGATOR].drain()
        by_shard = self._split(ops)
        with self._commit_lock:
            for i, shard in enumerate(self.shards):
                shard.barrier_commit(by_shard[i], clock)

    def _split(self, ops):
        by_shard = [[] for _ in self.shards]
        for op in ops:
            by_shard[op[1] % self.n_shards].append(op)
        return by_shard

    # ------------------------------------------------------------- inspection
    def add_clock_listener(self, fn: Callable[[int, Dict[str, np.ndarray], List[int]], None]) -> None:
        """Call ``fn(clock, tables, staleness_samples)`` once per completed clock, in order."""
        self._assembly.add(fn)

    def latest(self) -> Dict[str, np.ndarray]:
        out = {name: spec.initial_rows() * 0.0 for name, spec in self._specs.items()}
        for shard in self.shards:
            for table, rows in shard.latest().items():
                for r, vec in rows.items():
                    out[table][r] = vec
        return out

    def observe_staleness(self) -> Tuple[float, float]:
        samples = [x for s in self.shards for x in s.staleness_samples()]
        return staleness_stats(samples)

    def client(self, worker: int) -> "LocalClient":
        self._check_worker(worker)
        return LocalClient(self, worker)

    def shutdown(self) -> None:
        for shard in self.shards:
            shard.shutdown()


def staleness_stats(samples: Sequence[float]) -> Tuple[float, float]:
    if not len(samples):
        return 0.0, 0.0
    arr = np.asarray(samples, dtype=np.float64)
    return float(arr.mean()), float(arr.var())


class _SnapshotAssembler:
    """Joins per-shard clock snapshots into whole-table snapshots, emitted in clock order."""

    def __init__(self, ps: ParamServer):
        self._ps = ps
        self._lock = threading.Lock()
        self._parts: Dict[int, Dict[int, ClockSnapshot]] = {}
        self._next = 0
        self._fns: List[Callable] = []

    def add(self, fn) -> None:
        if not self._fns:
            for shard in self._ps.shards:
                shard.add_listener(self._on_shard)
        self._fns.append(fn)

    def _on_shard(self, shard_id: int, snap: ClockSnapshot) -> None:
        ready = []
        with self._lock:
            self._parts.setdefault(snap.clock, {})[shard_id] = snap
            while len(self._parts.get(self._next, ())) == self._ps.n_shards:
                ready.append(self._assemble(self._parts.pop(self._next)))
                self._next += 1
            # listener calls stay under the lock so clocks are delivered in order
            for clock, tables, samples in ready:
                for fn in self._fns:
                    fn(clock, tables, samples)

    def _assemble(self, parts: Dict[int, ClockSnapshot]):
        tables = {name: np.empty((spec.n_rows, spec.row_width))
                  for name, spec in self._ps.tables.items()}
        samples = []
        clock = None
        for snap in parts.values():
            clock = snap.clock
            samples.extend(snap.staleness)
            for table, rows in snap.rows.items():
                for r, vec in rows.items():
                    tables[table][r] = vec
        return clock, tables, samples


class LocalClient:
    """A worker's (or the aggregator's) handle on an in-process server."""

    def __init__(self, ps: ParamServer, worker: int):
        self.ps = ps
        self.worker = worker

    @property
    def clock(self) -> int:
        return self.ps.worker_clock(self.worker)

    def get(self, table: str, row: int) -> np.ndarray:
        return self.ps.get(table, row, self.worker)

    def get_table(self, table: str) -> np.ndarray:
        return self.ps.get_table(table, self.worker)

    def inc(self, table: str, row: int, col: int, delta: float) -> None:
        clock = self.clock if self.worker != AGGREGATOR else 0
        self.ps.inc(table, UpdateBatch(table, ((row, col, float(delta)),), self.worker, clock))

    def inc_row(self, table: str, row: int, delta) -> None:
        self.ps.inc_row(table, row, delta, self.worker)

    def put(self, table: str, row: int, col: int, value: float) -> None:
        self.ps.put(table, row, col, value, self.worker)

    def grant_put(self, table: str, cells) -> None:
        self.ps.grant_put(self.worker, table, cells)

    def commit(self) -> int:
        return self.ps.clock_commit(self.worker)

    def barrier(self, clock: int) -> None:
        if self.worker != AGGREGATOR:
            raise UsageError("only the aggregator issues barrier commits")
        self.ps.barrier_commit(clock)

    def close(self) -> None:
        pass
