"""The per-clock engine: schedule -> push on P workers -> pull -> clock commit.

Model-parallel apps (``schedule_kind`` other than ``"empty"``) run one
pipelined scheduler loop that hands each clock's decision to the workers,
collects their partial results, runs the aggregator and publishes its writes
with a barrier commit. Data-parallel apps run P free-running worker loops
gated only by the SSP read rule.

Metrics are taken from whole-table snapshots emitted by the parameter server
each time the slowest worker finishes a clock, so a record for clock ``t``
always describes the state after every clock-``t`` update.
"""
from __future__ import annotations

import csv
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .distributed import TRANSPORTS, Cluster
from .exceptions import PetuumError, RunAborted, ServerShutdown, UsageError
from .param_server import AGGREGATOR, READ_POLICIES, LocalClient, ParamServer, TableSpec
from .scheduler import (
    SCHEDULE_KINDS, CorrelationIndex, ScheduleDecision, Scheduler, compute_epsilon,
    count_passing_pairs, masked_spectral_radius, stream,
)
from .transport import ChannelClosed, Decision, Partial, PullDone, Shutdown

log = logging.getLogger(__name__)

MODES = ("inproc", "dist")
DIAGNOSTIC_CAP = 2000

# RNG stream key for injected straggler delays, kept apart from app sampling streams
_DELAY_STREAM = 1 << 21


@dataclass(frozen=True)
class StopRule:
    """Stop after ``max_clocks`` or once the relative objective change over
    ``window`` clocks falls below ``tol``, whichever comes first.

    ``target`` additionally stops as soon as the objective reaches it.
    """

    max_clocks: int = 100
    tol: Optional[float] = None
    window: int = 10
    target: Optional[float] = None

    def __post_init__(self):
        if self.max_clocks < 1:
            raise UsageError("max_clocks must be >= 1")
        if self.window < 1:
            raise UsageError("window must be >= 1")

    def should_stop(self, objectives: Sequence[float]) -> bool:
        if len(objectives) >= self.max_clocks:
            return True
        if self.target is not None and objectives and objectives[-1] <= self.target:
            return True
        if self.tol is None or len(objectives) <= self.window:
            return False
        old, new = objectives[-1 - self.window], objectives[-1]
        return abs(new - old) <= self.tol * max(abs(old), 1e-300)


@dataclass
class AppContract:
    """What an application hands the runtime.

    ``push_fn(ctx: WorkerContext)`` runs on every worker each clock. In
    model-parallel mode it returns a mapping ``{index: value}`` that is
    shipped to ``pull_fn(ctx: PullContext, decision, partials)``; ``partials``
    is ordered by worker id. ``pull_fn`` writes through ``ctx.ps`` and may
    return ``{index: (old, new)}`` to feed the priority scheduler.
    """

    name: str
    schedule_kind: str
    push_fn: Callable[["WorkerContext"], Optional[Mapping[int, float]]]
    tables: Sequence[TableSpec]
    objective_fn: Callable[[Mapping[str, np.ndarray]], float]
    pull_fn: Optional[Callable] = None
    n_params: int = 0
    corr: Optional[CorrelationIndex] = None
    block_map: Optional[Sequence[Sequence[int]]] = None
    shard_fn: Optional[Callable[[int], Sequence[Any]]] = None
    stop: StopRule = field(default_factory=StopRule)
    state: Any = None

    def __post_init__(self):
        if self.schedule_kind not in SCHEDULE_KINDS:
            raise UsageError(f"unknown schedule kind {self.schedule_kind!r}")
        if self.schedule_kind == "empty" and self.pull_fn is not None:
            raise UsageError("data-parallel apps (schedule_kind='empty') have no pull")
        if self.schedule_kind != "empty" and self.n_params < 1:
            raise UsageError("model-parallel apps must declare n_params")

    @property
    def model_parallel(self) -> bool:
        return self.schedule_kind != "empty"


@dataclass
class RunConfig:
    P: int = 1
    s: int = 0
    seed: int = 0
    mode: str = "inproc"
    shards: int = 1
    Q: Optional[int] = None
    theta: float = 0.5
    eta: float = 1e-6
    read_policy: str = "fresh"
    transport: str = "tcp"
    priority_form: str = "delta"
    bootstrap: Optional[bool] = None
    max_clocks: Optional[int] = None
    delays: Mapping[int, float] = field(default_factory=dict)
    jitter: float = 0.0
    partial_timeout: float = 60.0
    record_frames: bool = False
    keep_history: bool = True
    diagnostics: bool = True

    def __post_init__(self):
        if self.P < 1:
            raise UsageError("P must be >= 1")
        if self.s < 0:
            raise UsageError("s must be >= 0")
        if self.shards < 1:
            raise UsageError("shards must be >= 1")
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}")
        if self.transport not in TRANSPORTS:
            raise UsageError(f"transport must be one of {TRANSPORTS}")
        if self.read_policy not in READ_POLICIES:
            raise UsageError(f"read_policy must be one of {READ_POLICIES}")
        if self.Q is not None and self.Q <= self.P:
            raise UsageError(f"need Q > P, got Q={self.Q}, P={self.P}")
        if self.max_clocks is not None and self.max_clocks < 1:
            raise UsageError("max_clocks must be >= 1")
        if self.jitter < 0 or any(v < 0 for v in self.delays.values()):
            raise UsageError("delays must be non-negative")


@dataclass
class WorkerContext:
    worker: int
    clock: int
    ps: Any
    data: Any
    rng: np.random.Generator
    decision: Optional[ScheduleDecision] = None
    state: Any = None
    n_workers: int = 1


@dataclass
class PullContext:
    ps: Any
    clock: int
    state: Any = None


@dataclass(frozen=True)
class MetricsRecord:
    clock: int
    wall_ms: int
    objective: float
    degree: int
    staleness_mean: float
    staleness_var: float
    epsilon: float


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRecord))


@dataclass
class MetricsSeries:
    records: List[MetricsRecord] = field(default_factory=list)
    initial_objective: float = math.nan
    final_tables: Dict[str, np.ndarray] = field(default_factory=dict)
    history: List[Dict[str, np.ndarray]] = field(default_factory=list)
    staleness: tuple = (0.0, 0.0)
    frames: Dict[tuple, List[bytes]] = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def objectives(self) -> List[float]:
        return [r.objective for r in self.records]

    @property
    def final_objective(self) -> float:
        return self.records[-1].objective if self.records else self.initial_objective

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
            for r in self.records:
                writer.writerow([_fmt(v) for v in asdict(r).values()])


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


class _Diagnostics:
    """Per-clock epsilon from the masked spectral radius and degree moments."""

    def __init__(self, app: AppContract, cfg: RunConfig):
        self.rho = self.N = None
        if not cfg.diagnostics or app.corr is None or app.corr.d > DIAGNOSTIC_CAP:
            return
        if app.schedule_kind not in ("srrp", "priority", "ideal"):
            return
        self.rho = masked_spectral_radius(app.corr, cfg.theta, cap=DIAGNOSTIC_CAP)
        self.N = count_passing_pairs(app.corr, cfg.theta, rng=stream(cfg.seed, 1 << 22))

    def epsilon(self, scheduler: Optional[Scheduler], clock: int, d: int) -> float:
        if self.rho is None or scheduler is None or self.N < 1:
            return math.nan
        ep, ep2 = scheduler.degree_moments(upto=clock)
        return compute_epsilon(d, ep, ep2, max(self.rho, 1.0), self.N)


class RunHandle:
    """A run in progress: poll metrics, abort, wait for the final series."""

    def __init__(self, app: AppContract, cfg: RunConfig, data: Optional[Sequence[Any]] = None):
        if data is None:
            if app.shard_fn is None:
                raise UsageError("no data shards given and the app has no shard_fn")
            data = app.shard_fn(cfg.P)
        data = list(data)
        if len(data) != cfg.P:
            raise UsageError(f"need one data shard per worker: got {len(data)} for P={cfg.P}")
        if app.model_parallel and app.schedule_kind in ("srrp", "priority", "ideal") and app.corr is None:
            raise UsageError(f"{app.schedule_kind} scheduling needs a CorrelationIndex")
        self.app = app
        self.cfg = cfg
        self.data = data
        self.stop_rule = replace(app.stop, max_clocks=cfg.max_clocks) \
            if cfg.max_clocks is not None else app.stop
        self.ps = ParamServer(cfg.P, cfg.s, cfg.shards, cfg.read_policy, app.tables)
        self.series = MetricsSeries()
        self.series.initial_objective = float(app.objective_fn(
            {t.name: t.initial_rows() for t in app.tables}))
        self.scheduler: Optional[Scheduler] = None
        if app.model_parallel:
            self.scheduler = Scheduler(
                app.schedule_kind, cfg.P, app.n_params, Q=cfg.Q, theta=cfg.theta, eta=cfg.eta,
                corr=app.corr, seed=cfg.seed, block_map=app.block_map,
                bootstrap=cfg.bootstrap, priority_form=cfg.priority_form)
        self.cluster: Optional[Cluster] = None
        self._snapshots: "queue.Queue" = queue.Queue()
        self._failures: "queue.Queue" = queue.Queue()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._aborted = threading.Event()
        self._done = threading.Event()
        self._error: Optional[BaseException] = None
        self._workers: List[threading.Thread] = []
        self.ps.add_clock_listener(lambda c, tables, samples: self._snapshots.put((c, tables, samples)))
        self._thread = threading.Thread(target=self._main, name=f"run-{app.name}", daemon=True)

    # ---------------------------------------------------------------- public
    def start(self) -> "RunHandle":
        self._t0 = time.perf_counter()
        self._thread.start()
        return self

    def poll(self) -> List[MetricsRecord]:
        """Metrics recorded so far."""
        with self._lock:
            return list(self.series.records)

    @property
    def done(self) -> bool:
        return self._done.is_set()

    def abort(self) -> None:
        self._aborted.set()
        self._stop.set()
        self.ps.shutdown()

    def wait(self, timeout: Optional[float] = None) -> MetricsSeries:
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise TimeoutError("run still in progress")
        if self._error is not None:
            raise self._error
        return self.series

    def observe_staleness(self):
        return self.ps.observe_staleness()

    # -------------------------------------------------------------- plumbing
    def _client(self, worker: int):
        if self.cluster is None:
            return LocalClient(self.ps, worker)
        return self.cluster.client(worker)

    def _delay(self, worker: int, rng: np.random.Generator) -> None:
        pause = self.cfg.delays.get(worker, 0.0)
        if self.cfg.jitter:
            pause += rng.uniform(0.0, self.cfg.jitter)
        if pause:
            time.sleep(pause)

    def _fail(self, worker: int, exc: BaseException) -> None:
        if isinstance(exc, (ServerShutdown, ChannelClosed)) and self._stop.is_set():
            return
        self._failures.put((worker, exc))

    def _check_failures(self) -> None:
        if self._aborted.is_set():
            raise RunAborted("run aborted")
        try:
            worker, exc = self._failures.get_nowait()
        except queue.Empty:
            return
        raise RunAborted(f"worker {worker} failed: {type(exc).__name__}: {exc}") from exc

    def _spawn_worker(self, target, *args) -> None:
        t = threading.Thread(target=target, args=args, name=f"worker-{args[0]}", daemon=True)
        t.start()
        self._workers.append(t)

    def _next_snapshot(self, clock: int, timeout: float):
        deadline = time.monotonic() + timeout
        while True:
            self._check_failures()
            try:
                c, tables, samples = self._snapshots.get(timeout=0.02)
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise RunAborted(f"clock {clock} did not complete within {timeout}s")
                continue
            if c != clock:
                raise RunAborted(f"snapshot for clock {c} arrived while waiting for {clock}")
            return tables, samples

    def _record(self, clock: int, tables, samples, degree: int) -> bool:
        objective = float(self.app.objective_fn(tables))
        mean, var = _moments(samples)
        eps = self._diag.epsilon(self.scheduler, clock, self.app.n_params)
        wall = int((time.perf_counter() - self._t0) * 1000)
        rec = MetricsRecord(clock, wall, objective, int(degree), mean, var, eps)
        with self._lock:
            self.series.records.append(rec)
            if self.cfg.keep_history:
                self.series.history.append(tables)
            self.series.final_tables = tables
        if eps >= 1.0:
            log.warning("clock %d: epsilon %.3g >= 1, descent is not guaranteed", clock, eps)
        return self.stop_rule.should_stop(self.series.objectives)

    def _main(self) -> None:
        try:
            self._diag = _Diagnostics(self.app, self.cfg)
            if self.cfg.mode == "dist":
                self.cluster = Cluster(self.ps, self.cfg.transport, record=self.cfg.record_frames,
                                       read_timeout=None)
            if self.app.model_parallel:
                self._run_model_parallel()
            else:
                self._run_data_parallel()
        except BaseException as exc:
            self._error = exc if isinstance(exc, PetuumError) else RunAborted(
                f"{type(exc).__name__}: {exc}")
            if self._error is not exc:
                self._error.__cause__ = exc
        finally:
            self._stop.set()
            self.ps.shutdown()
            for t in self._workers:
                t.join(timeout=5.0)
            if self.cluster is not None:
                self.cluster.close()
                self.series.frames = self.cluster.frames()
            self.series.staleness = self.ps.observe_staleness()
            self._done.set()

    # --------------------------------------------------------- model-parallel
    def _mp_worker(self, worker: int, ctl) -> None:
        try:
            client = self._client(worker)
            rng = stream(self.cfg.seed, worker)
            delay_rng = stream(self.cfg.seed, worker, _DELAY_STREAM)
            while True:
                msg = ctl.recv()
                if isinstance(msg, Shutdown):
                    break
                if not isinstance(msg, Decision):
                    raise RunAborted(f"worker {worker} expected DECISION, got {type(msg).__name__}")
                if msg.clock != client.clock:
                    raise RunAborted(f"worker {worker} at clock {client.clock} got decision {msg.clock}")
                dec = ScheduleDecision(msg.clock, msg.assignments)
                ctx = WorkerContext(worker, msg.clock, client, self.data[worker], rng, dec,
                                    self.app.state, self.cfg.P)
                partial = self.app.push_fn(ctx) or {}
                self._delay(worker, delay_rng)
                ctl.send(Partial(msg.clock, worker, tuple((int(j), float(v)) for j, v in partial.items())))
                done = ctl.recv()
                if isinstance(done, Shutdown):
                    break
                if not (isinstance(done, PullDone) and done.clock == msg.clock):
                    raise RunAborted(f"worker {worker} expected PULL_DONE({msg.clock}), got {done!r}")
                client.commit()
        except BaseException as exc:
            self._fail(worker, exc)
        finally:
            try:
                ctl.close()
            except OSError:
                pass

    def _control_channels(self):
        from .transport import LoopbackChannel
        sched_ends = []
        for w in range(self.cfg.P):
            if self.cluster is not None:
                sched_end, worker_end = self.cluster.control_pair(w)
            else:
                sched_end, worker_end = LoopbackChannel.pair()
            sched_ends.append(sched_end)
            self._spawn_worker(self._mp_worker, w, worker_end)
        return sched_ends

    def _collect(self, ctl, clock: int) -> Dict[int, Dict[int, float]]:
        partials: Dict[int, Dict[int, float]] = {}
        deadline = time.monotonic() + self.cfg.partial_timeout
        for w, ch in enumerate(ctl):
            while True:
                self._check_failures()
                try:
                    msg = ch.recv(timeout=0.02)
                    break
                except TimeoutError:
                    if time.monotonic() > deadline:
                        raise RunAborted(f"clock {clock}: no partial result from worker {w} "
                                         f"within {self.cfg.partial_timeout}s") from None
                except ChannelClosed:
                    self._check_failures()
                    raise RunAborted(f"clock {clock}: worker {w} disconnected") from None
            if not isinstance(msg, Partial) or msg.clock != clock or msg.worker != w:
                raise RunAborted(f"clock {clock}: unexpected message from worker {w}: {msg!r}")
            partials[w] = dict(msg.entries)
        return partials

    def _run_model_parallel(self) -> None:
        sched = self.scheduler
        ctl = self._control_channels()
        agg = self._client(AGGREGATOR)
        try:
            decision = sched.decision(0)
            for clock in range(self.stop_rule.max_clocks):
                for ch in ctl:
                    ch.send(Decision(clock, decision.assignments))
                # pipelined: the next decision only sees pulls up to clock - 1
                upcoming = sched.decision(clock + 1)
                partials = self._collect(ctl, clock)
                sched.dispatch_pull(decision, partials, self.app.pull_fn,
                                    PullContext(agg, clock, self.app.state))
                agg.barrier(clock)
                for ch in ctl:
                    ch.send(PullDone(clock))
                tables, samples = self._next_snapshot(clock, self.cfg.partial_timeout)
                if self._record(clock, tables, samples, decision.degree):
                    break
                decision = upcoming
            sched.degrees[:] = sched.degrees[: len(self.series.records)]
        finally:
            self._stop.set()
            # workers block on their control channel, so release them before joining
            for ch in ctl:
                try:
                    ch.send(Shutdown())
                except (ChannelClosed, OSError):
                    pass
                ch.close()
            for t in self._workers:
                t.join(timeout=5.0)

    # ---------------------------------------------------------- data-parallel
    def _dp_worker(self, worker: int) -> None:
        try:
            client = self._client(worker)
            rng = stream(self.cfg.seed, worker)
            delay_rng = stream(self.cfg.seed, worker, _DELAY_STREAM)
            for clock in range(self.stop_rule.max_clocks):
                if self._stop.is_set():
                    break
                ctx = WorkerContext(worker, clock, client, self.data[worker], rng, None,
                                    self.app.state, self.cfg.P)
                self.app.push_fn(ctx)
                self._delay(worker, delay_rng)
                client.commit()
        except BaseException as exc:
            self._fail(worker, exc)

    def _run_data_parallel(self) -> None:
        for w in range(self.cfg.P):
            self._spawn_worker(self._dp_worker, w)
        for clock in range(self.stop_rule.max_clocks):
            tables, samples = self._next_snapshot(clock, self.cfg.partial_timeout)
            if self._record(clock, tables, samples, self.cfg.P):
                break
        self._stop.set()
        self.ps.shutdown()


def _moments(samples) -> tuple:
    if not len(samples):
        return 0.0, 0.0
    arr = np.asarray(samples, dtype=np.float64)
    return float(arr.mean()), float(arr.var())


def start(app: AppContract, cfg: RunConfig, data: Optional[Sequence[Any]] = None) -> RunHandle:
    return RunHandle(app, cfg, data).start()


def run(app: AppContract, cfg: RunConfig, data: Optional[Sequence[Any]] = None) -> MetricsSeries:
    """Execute ``app`` until its stop rule fires and return the per-clock metrics."""
    return start(app, cfg, data).wait()


def observe_staleness(handle: RunHandle):
    """(mean, variance) of per-read observed staleness for a running or finished run."""
    return handle.observe_staleness()
