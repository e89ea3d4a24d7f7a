"""Scripted-interleaving conformance checks for the SSP read rule.

Every increment in a scenario is a distinct power of two, so the value a
read returns identifies exactly which increments it saw. Each read is checked
against the bounded-staleness contract:

* it contains every increment from another worker stamped ``<= c - s - 1``,
* it contains all of the reader's own increments (committed or buffered),
* it contains nothing that was never committed by another worker.

Reads the gate must refuse are attempted with a short timeout and must block.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .param_server import ParamServer, TableSpec, UpdateBatch

TABLE = "t"
N_ROWS, WIDTH = 3, 2
BLOCK_PROBE = 0.01


@dataclass
class ScenarioResult:
    name: str
    passed: bool
    reads: int = 0
    blocked: int = 0
    detail: str = ""


@dataclass
class _Delta:
    bit: int
    worker: int
    ts: int
    cell: Tuple[int, int]
    committed: bool = False


@dataclass
class _Script:
    """Drives one ParamServer step by step and checks every read."""

    P: int
    s: int
    ps: ParamServer = field(init=False)
    deltas: List[_Delta] = field(default_factory=list)
    reads: int = 0
    blocked: int = 0

    def __post_init__(self):
        self.ps = ParamServer(self.P, self.s, n_shards=2, tables=[TableSpec(TABLE, N_ROWS, WIDTH)])

    def clock(self, w: int) -> int:
        return self.ps.worker_clock(w)

    def inc(self, w: int, row: int, col: int) -> None:
        bit = len(self.deltas)
        if bit > 52:
            raise ValueError("too many increments for exact identification")
        self.deltas.append(_Delta(bit, w, self.clock(w), (row, col)))
        self.ps.inc(TABLE, UpdateBatch(TABLE, ((row, col, float(2**bit)),), w, self.clock(w)))

    def commit(self, w: int) -> None:
        self.ps.clock_commit(w)
        for d in self.deltas:
            if d.worker == w:
                d.committed = True

    def permitted(self, w: int) -> bool:
        return self.ps.read_permitted(w)

    def read(self, w: int, row: int) -> Optional[str]:
        """Read ``row`` as worker ``w``; returns a violation message or None."""
        c = self.clock(w)
        vec = self.ps.get(TABLE, row, w)
        self.reads += 1
        for col in range(WIDTH):
            seen = int(vec[col])
            if float(seen) != vec[col]:
                return f"non-integer cell value {vec[col]}"
            for d in self.deltas:
                if d.cell != (row, col):
                    continue
                has = bool(seen >> d.bit & 1)
                if d.worker == w and not has:
                    return f"worker {w} does not see its own increment {d.bit}"
                if d.worker != w and d.committed and d.ts <= c - self.s - 1 and not has:
                    return (f"worker {w} at clock {c} missed increment {d.bit} "
                            f"from worker {d.worker} stamped {d.ts} (s={self.s})")
                if d.worker != w and not d.committed and has:
                    return f"worker {w} saw uncommitted increment {d.bit} of worker {d.worker}"
            known = sum(1 << d.bit for d in self.deltas if d.cell == (row, col))
            if seen & ~known:
                return f"cell ({row},{col}) holds unknown increments"
        return None

    def must_block(self, w: int) -> Optional[str]:
        try:
            self.ps.get(TABLE, 0, w, timeout=BLOCK_PROBE)
        except TimeoutError:
            self.blocked += 1
            return None
        return f"worker {w} at clock {self.clock(w)} was not blocked (s={self.s}, vc={self.ps.vector_clock})"


def random_scenario(P: int, s: int, seed: int, max_clock: int = 8, steps: int = 60) -> ScenarioResult:
    """Random interleaving of inc/read/commit across P workers."""
    name = f"random-P{P}-s{s}-seed{seed}"
    rng = np.random.default_rng(seed)
    sc = _Script(P, s)
    for _ in range(steps):
        w = int(rng.integers(P))
        if sc.clock(w) >= max_clock:
            continue
        if not sc.permitted(w):
            err = sc.must_block(w)
            if err:
                return ScenarioResult(name, False, sc.reads, sc.blocked, err)
            continue
        action = rng.random()
        if action < 0.4 and len(sc.deltas) < 50:
            sc.inc(w, int(rng.integers(N_ROWS)), int(rng.integers(WIDTH)))
        elif action < 0.7:
            err = sc.read(w, int(rng.integers(N_ROWS)))
            if err:
                return ScenarioResult(name, False, sc.reads, sc.blocked, err)
        else:
            sc.commit(w)
    for w in range(P):
        for row in range(N_ROWS):
            if sc.permitted(w):
                err = sc.read(w, row)
                if err:
                    return ScenarioResult(name, False, sc.reads, sc.blocked, err)
    return ScenarioResult(name, True, sc.reads, sc.blocked)


def _scripted(name: str, P: int, s: int, body: Callable[[_Script], Optional[str]]) -> ScenarioResult:
    sc = _Script(P, s)
    try:
        err = body(sc)
    except Exception as exc:  # noqa: BLE001 - a crash is a failed scenario
        err = f"{type(exc).__name__}: {exc}"
    return ScenarioResult(name, err is None, sc.reads, sc.blocked, err or "")


def _bulk_synchronous(sc: _Script) -> Optional[str]:
    # s=0: worker 0 may not start clock 1 until worker 1 finished clock 0
    sc.inc(1, 0, 0)
    sc.commit(0)
    err = sc.must_block(0)
    if err:
        return err
    sc.commit(1)
    return sc.read(0, 0)


def _lagged_visibility(sc: _Script) -> Optional[str]:
    # s=1: w0 at clock 2 while w1 has committed clocks 0 and 1
    sc.inc(1, 0, 0)
    sc.commit(1)
    sc.inc(1, 0, 0)
    sc.commit(1)
    sc.commit(0)
    sc.commit(0)
    if not sc.permitted(0):
        return "read at clock 2 should be admitted with s=1"
    return sc.read(0, 0)


def _bound_exact(sc: _Script) -> Optional[str]:
    # 3 workers, s=2: a reader at clock t+s+1 sees every clock-t increment
    for w in range(3):
        sc.inc(w, 1, 1)
    for w in range(3):
        sc.commit(w)
    for _ in range(2):
        sc.commit(0)
        for w in (1, 2):
            sc.commit(w)
    return sc.read(0, 1)


def _read_my_writes(sc: _Script) -> Optional[str]:
    sc.inc(0, 2, 0)
    sc.inc(0, 2, 0)
    return sc.read(0, 2)


def _gate_runs_ahead(sc: _Script) -> Optional[str]:
    # s=2, worker 1 never commits: worker 0 may run exactly s+1 clocks ahead
    for _ in range(3):
        err = sc.read(0, 0)
        if err:
            return err
        sc.inc(0, 0, 1)
        sc.commit(0)
    return sc.must_block(0)


def straggler_scenario(delay: float = 0.05) -> ScenarioResult:
    """Threaded: a reader at clock 1 blocks until the straggler commits clock 0."""
    name = "straggler-blocks-reader"
    ps = ParamServer(2, 0, tables=[TableSpec(TABLE, 1, 1)])
    ps.inc(TABLE, UpdateBatch(TABLE, ((0, 0, 1.0),), 1, 0))
    ps.clock_commit(0)
    result: Dict[str, object] = {}

    def reader():
        t0 = time.perf_counter()
        result["value"] = float(ps.get(TABLE, 0, 0, timeout=5.0)[0])
        result["waited"] = time.perf_counter() - t0
        result["after_commit"] = committed.is_set()

    committed = threading.Event()
    th = threading.Thread(target=reader)
    th.start()
    time.sleep(delay)
    blocked_meanwhile = th.is_alive()
    committed.set()
    ps.clock_commit(1)
    th.join(5.0)
    ok = (blocked_meanwhile and result.get("after_commit") is True
          and result.get("value") == 1.0 and result.get("waited", 0) >= delay * 0.9)
    detail = "" if ok else f"blocked={blocked_meanwhile} result={result}"
    return ScenarioResult(name, ok, 1, int(blocked_meanwhile), detail)


def run_conformance(n_random: int = 27, seed: int = 0) -> List[ScenarioResult]:
    """The full suite: hand-written scripts, random interleavings, the straggler case."""
    results = [
        _scripted("bulk-synchronous-s0", 2, 0, _bulk_synchronous),
        _scripted("lagged-visibility-s1", 2, 1, _lagged_visibility),
        _scripted("bound-exact-3w-s2", 3, 2, _bound_exact),
        _scripted("read-my-writes", 2, 0, _read_my_writes),
        _scripted("gate-runs-ahead-s2", 2, 2, _gate_runs_ahead),
    ]
    for k in range(n_random):
        P = 2 + k % 3
        s = (k // 3) % 3
        results.append(random_scenario(P, s, seed * 1000 + k))
    results.append(straggler_scenario())
    return results
