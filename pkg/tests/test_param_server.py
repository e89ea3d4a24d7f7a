import threading
import time

import numpy as np
import pytest

from petuum_lite.exceptions import ContractViolation, ServerShutdown, UsageError
from petuum_lite.param_server import AGGREGATOR, ParamServer, TableSpec, UpdateBatch, staleness_stats


def make_ps(P=2, s=0, shards=1, rows=2, width=4, **kw):
    return ParamServer(P, s, n_shards=shards, tables=[TableSpec("t", rows, width)], **kw)


def inc(ps, w, row, col, delta):
    ps.inc("t", UpdateBatch("t", ((row, col, delta),), w, ps.worker_clock(w)))


def test_fresh_table_reads_zero():
    ps = make_ps()
    np.testing.assert_array_equal(ps.get("t", 0, 1), np.zeros(4))


def test_initializer_is_respected():
    ps = ParamServer(1, tables=[TableSpec("m", 2, 2, init=np.eye(2))])
    np.testing.assert_array_equal(ps.get_table("m", 0), np.eye(2))


def test_reader_blocks_until_straggler_commits():
    ps = make_ps(P=2, s=0)
    inc(ps, 1, 0, 0, 5.0)
    ps.clock_commit(0)
    got = {}

    def read():
        got["v"] = ps.get("t", 0, 0, timeout=5.0)[0]

    th = threading.Thread(target=read)
    th.start()
    time.sleep(0.05)
    assert th.is_alive()
    ps.clock_commit(1)
    th.join(5.0)
    assert got["v"] == 5.0


def test_s1_reads_immediately_with_clock0_deltas():
    ps = make_ps(P=2, s=1)
    inc(ps, 1, 0, 0, 1.0)
    ps.clock_commit(1)
    inc(ps, 1, 0, 1, 1.0)
    ps.clock_commit(1)
    ps.clock_commit(0)
    ps.clock_commit(0)
    assert ps.worker_clock(0) == 2
    assert ps.read_permitted(0)
    assert ps.get("t", 0, 0, timeout=0.0)[0] == 1.0


def test_inc_is_additive_and_visible_to_self():
    ps = make_ps()
    inc(ps, 0, 0, 0, 2.0)
    inc(ps, 0, 0, 0, 2.0)
    assert ps.get("t", 0, 0)[0] == 4.0
    inc(ps, 1, 1, 0, 3.0)
    inc(ps, 1, 1, 0, -3.0)
    assert ps.get("t", 1, 1)[0] == 0.0


def test_two_workers_sum():
    ps = make_ps()
    inc(ps, 0, 0, 2, 1.0)
    inc(ps, 1, 0, 2, 1.0)
    ps.clock_commit(0)
    ps.clock_commit(1)
    assert ps.get("t", 0, 0)[2] == 2.0
    assert ps.get("t", 0, 1)[2] == 2.0


def test_uncommitted_writes_invisible_to_others():
    ps = make_ps(s=1)
    inc(ps, 1, 0, 0, 1.0)
    assert ps.get("t", 0, 0)[0] == 0.0


def test_put_then_read():
    ps = make_ps(P=1)
    ps.grant_put(0, "t", [(0, 3)])
    ps.put("t", 0, 3, 0.5, 0)
    ps.clock_commit(0)
    assert ps.get("t", 0, 0)[3] == 0.5


def test_put_then_inc_same_writer_follows_program_order():
    ps = make_ps(P=2)
    ps.grant_put(0, "t", [(0, 0)])
    ps.put("t", 0, 0, 0.5, 0)
    inc(ps, 0, 0, 0, 0.1)
    assert ps.get("t", 0, 0)[0] == pytest.approx(0.6)
    ps.clock_commit(0)
    ps.clock_commit(1)
    assert ps.get("t", 0, 1)[0] == pytest.approx(0.6)


def test_conflicting_puts_raise():
    ps = make_ps(P=2)
    for w in (0, 1):
        ps.grant_put(w, "t", [(1, 1)])
    ps.put("t", 1, 1, 1.0, 0)
    ps.put("t", 1, 1, 2.0, 1)
    ps.clock_commit(0)
    with pytest.raises(ContractViolation):
        ps.clock_commit(1)


def test_put_without_right_raises():
    ps = make_ps()
    with pytest.raises(ContractViolation):
        ps.put("t", 0, 0, 1.0, 0)


def test_aggregator_put_visible_next_clock():
    ps = make_ps(P=2, s=2)
    ps.put("t", 0, 0, 7.0, AGGREGATOR)
    ps.barrier_commit(0)
    assert ps.get("t", 0, 0)[0] == 0.0
    ps.clock_commit(0)
    assert ps.get("t", 0, 0)[0] == 7.0


def test_commit_with_empty_buffer_only_ticks():
    ps = make_ps()
    ps.clock_commit(0)
    assert ps.worker_clock(0) == 1
    assert ps.worker_clock(1) == 0
    np.testing.assert_array_equal(ps.latest()["t"], np.zeros((2, 4)))


def test_three_workers_reader_at_t_plus_s_plus_1_sees_clock_t():
    ps = ParamServer(3, 2, tables=[TableSpec("t", 1, 1)])
    for w in range(3):
        inc(ps, w, 0, 0, float(2 ** w))
    for t in range(3):
        for w in range(3):
            ps.clock_commit(w)
    assert ps.worker_clock(0) == 3
    assert ps.get("t", 0, 0, timeout=0.0)[0] == 7.0


def test_errors():
    ps = make_ps()
    with pytest.raises(UsageError):
        ps.get("nope", 0, 0)
    with pytest.raises(UsageError):
        ps.get("t", 9, 0)
    with pytest.raises(UsageError):
        ps.get("t", 0, 7)
    with pytest.raises(UsageError):
        ps.inc("t", UpdateBatch("t", ((0, 0, 1.0),), 0, 3))
    with pytest.raises(UsageError):
        ps.inc("t", UpdateBatch("t", ((0, 9, 1.0),), 0, 0))


def test_shutdown_interrupts_blocked_reader():
    ps = make_ps()
    ps.clock_commit(0)
    errors = []

    def read():
        try:
            ps.get("t", 0, 0, timeout=5.0)
        except ServerShutdown as exc:
            errors.append(exc)

    th = threading.Thread(target=read)
    th.start()
    time.sleep(0.05)
    ps.shutdown()
    th.join(5.0)
    assert len(errors) == 1


@pytest.mark.parametrize("shards", [1, 3])
def test_delta_conservation_against_sequential_replay(shards):
    """Final state equals a replay of all committed ops ordered by (clock, worker, program order)."""
    rng = np.random.default_rng(3)
    P, rows, width, clocks = 3, 5, 3, 6
    ps = make_ps(P=P, s=1, shards=shards, rows=rows, width=width)
    log = []
    for t in range(clocks):
        cells = [(int(r), int(c)) for r, c in zip(rng.integers(rows, size=P), rng.integers(width, size=P))]
        for w in rng.permutation(P):
            w = int(w)
            ps.grant_put(w, "t", [cells[w]])
            for k in range(int(rng.integers(1, 6))):
                if rng.random() < 0.2 and len({cells[v] for v in range(P)}) == P:
                    value = float(rng.normal())
                    ps.put("t", *cells[w], value, w)
                    log.append((t, w, k, "put", cells[w], value))
                else:
                    cell = (int(rng.integers(rows)), int(rng.integers(width)))
                    delta = float(rng.normal())
                    inc(ps, w, *cell, delta)
                    log.append((t, w, k, "inc", cell, delta))
            ps.clock_commit(w)
    expected = np.zeros((rows, width))
    for t, w, k, kind, (r, c), v in sorted(log, key=lambda e: e[:3]):
        if kind == "put":
            expected[r, c] = v
        else:
            expected[r, c] += v
    np.testing.assert_allclose(ps.latest()["t"], expected, rtol=0, atol=1e-12)


def test_staleness_stats():
    assert staleness_stats([]) == (0.0, 0.0)
    mean, var = staleness_stats([0, 2])
    assert (mean, var) == (1.0, 1.0)
