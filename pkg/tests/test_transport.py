import struct
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from _messages import random_message
from petuum_lite import transport as tp
from petuum_lite.distributed import Cluster
from petuum_lite.exceptions import ContractViolation, ProtocolError, UsageError
from petuum_lite.param_server import AGGREGATOR, ParamServer, TableSpec


def test_clock_commit_bytes():
    frame = tp.encode(tp.ClockCommit(worker=2, clock=7))
    assert frame.hex(" ") == "0c 00 00 00 05 02 00 00 00 07 00 00 00 00 00 00 00"


def test_get_req_round_trip():
    msg = tp.GetReq(table="L", row=0, reader=1)
    assert tp.decode(tp.encode(msg)) == msg


def test_message_codes_are_stable():
    assert {cls.__name__: code for cls, code in tp.CODES.items()} == {
        "GetReq": 0x01, "GetResp": 0x02, "Inc": 0x03, "Put": 0x04, "ClockCommit": 0x05,
        "Decision": 0x10, "Partial": 0x11, "PullDone": 0x12, "Hello": 0x20, "Shutdown": 0x21,
        "Error": 0x2F,
    }


def test_length_mismatch_reports_offset():
    frame = struct.pack("<IB", 100, 0x12) + bytes(50)
    with pytest.raises(ProtocolError) as info:
        tp.decode(frame)
    assert info.value.offset == 55


def test_trailing_bytes_report_offset():
    frame = tp.encode(tp.PullDone(3))
    bad = struct.pack("<IB", 9, 0x12) + frame[5:] + b"\x00"
    with pytest.raises(ProtocolError) as info:
        tp.decode(bad)
    assert info.value.offset == 13


def test_truncated_header_and_unknown_type():
    with pytest.raises(ProtocolError) as info:
        tp.decode(b"\x01\x00")
    assert info.value.offset == 2
    with pytest.raises(ProtocolError) as info:
        tp.decode(struct.pack("<IB", 0, 0x7E))
    assert info.value.offset == 4


def test_truncated_payload_reports_field_offset():
    # PUT with a 1-char table name, cut inside the f64 value
    full = tp.encode(tp.Put("b", 1, 2, 0.5, 3))
    payload = full[5:16]
    with pytest.raises(ProtocolError) as info:
        tp.decode(struct.pack("<IB", len(payload), 0x04) + payload)
    assert info.value.offset == 5 + 3 + 8


def test_encode_rejects_out_of_range_fields():
    with pytest.raises(ValueError):
        tp.encode(tp.ClockCommit(worker=-1, clock=0))
    with pytest.raises(ValueError):
        tp.encode(tp.PullDone(2**64))
    with pytest.raises(TypeError):
        tp.encode(object())


def test_random_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(5000):
        msg = random_message(rng)
        frame = tp.encode(msg)
        back = tp.decode(frame)
        assert back == msg
        assert tp.encode(back) == frame


@given(st.text(max_size=50), st.integers(0, 2**32 - 1),
       st.lists(st.floats(allow_nan=False), max_size=20))
def test_get_resp_round_trip_property(table, row, values):
    msg = tp.GetResp(table, row, tuple(values))
    assert tp.decode(tp.encode(msg)) == msg


def test_read_frame_from_byte_stream():
    data = tp.encode(tp.Hello(1, tp.ROLE_WORKER, 4)) + tp.encode(tp.Shutdown())
    pos = 0

    def recv_exact(n):
        nonlocal pos
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    assert tp.decode(tp.read_frame(recv_exact)) == tp.Hello(1, tp.ROLE_WORKER, 4)
    assert tp.decode(tp.read_frame(recv_exact)) == tp.Shutdown()


def test_loopback_channel_fifo_and_close():
    a, b = tp.LoopbackChannel.pair(record=True)
    for k in range(3):
        a.send(tp.PullDone(k))
    assert [b.recv(1.0).clock for k in range(3)] == [0, 1, 2]
    assert len(a.sent) == 3
    with pytest.raises(TimeoutError):
        b.recv(0.01)
    a.close()
    with pytest.raises(tp.ChannelClosed):
        b.recv(1.0)


def test_tcp_channel_round_trip_and_partial_frames():
    listener = tp.TcpListener()
    got = {}

    def server():
        ch = listener.accept(5.0)
        got["msgs"] = [ch.recv(5.0) for _ in range(2)]
        ch.send(tp.Error("done"))
        ch.close()

    th = threading.Thread(target=server)
    th.start()
    client = tp.tcp_connect(*listener.address)
    frame = tp.encode(tp.Partial(1, 2, ((3, 0.25),)))
    client.sock.sendall(frame[:7])
    client.sock.sendall(frame[7:])
    client.send(tp.PullDone(9))
    assert client.recv(5.0) == tp.Error("done")
    th.join(5.0)
    listener.close()
    client.close()
    assert got["msgs"] == [tp.Partial(1, 2, ((3, 0.25),)), tp.PullDone(9)]


def _script(transport):
    """Fixed 2-worker script over 2 shards; returns the recorded frames and final table."""
    ps = ParamServer(2, 0, n_shards=2, tables=[TableSpec("t", 3, 2)])
    with Cluster(ps, transport=transport, record=True) as cluster:
        c0, c1 = cluster.client(0), cluster.client(1)
        for t in range(3):
            c0.inc("t", t % 3, 0, 1.0 + t)
            c1.inc_row("t", (t + 1) % 3, np.array([0.5, -0.5]))
            c0.commit()
            c1.commit()
            c0.get("t", 0)
            c1.get_table("t")
        frames = cluster.frames()
        final = ps.latest()["t"]
        c0.close()
        c1.close()
    return frames, final


def test_loopback_and_tcp_produce_identical_frames():
    tcp_frames, tcp_final = _script("tcp")
    loop_frames, loop_final = _script("loopback")
    assert tcp_frames == loop_frames
    assert sum(len(v) for v in tcp_frames.values()) > 0
    np.testing.assert_array_equal(tcp_final, loop_final)
    np.testing.assert_array_equal(tcp_final, [[1.5, -0.5], [2.5, -0.5], [3.5, -0.5]])


@pytest.mark.parametrize("transport", ["tcp", "loopback"])
def test_remote_errors_surface_with_local_types(transport):
    ps = ParamServer(2, 0, tables=[TableSpec("t", 1, 1)])
    with Cluster(ps, transport=transport) as cluster:
        c0, c1 = cluster.client(0), cluster.client(1)
        with pytest.raises(UsageError):
            c0.get("missing", 0)
        with pytest.raises(ContractViolation):
            c0.put("t", 0, 0, 1.0)
        c0.grant_put("t", [(0, 0)])
        c1.grant_put("t", [(0, 0)])
        c0.put("t", 0, 0, 1.0)
        c1.put("t", 0, 0, 2.0)
        c0.commit()
        with pytest.raises(ContractViolation):
            c1.commit()
        c0.close()
        c1.close()


def test_control_pair_carries_decisions():
    ps = ParamServer(1, 0, tables=[TableSpec("t", 1, 1)])
    with Cluster(ps, transport="tcp") as cluster:
        sched, worker = cluster.control_pair(0)
        sched.send(tp.Decision(0, ((0, (4, 5)),)))
        assert worker.recv(5.0) == tp.Decision(0, ((0, (4, 5)),))
        worker.send(tp.Partial(0, 0, ((4, 1.5),)))
        assert sched.recv(5.0) == tp.Partial(0, 0, ((4, 1.5),))


def test_aggregator_barrier_over_the_wire():
    ps = ParamServer(1, 0, tables=[TableSpec("t", 1, 1)])
    with Cluster(ps, transport="loopback") as cluster:
        agg, w = cluster.client(AGGREGATOR), cluster.client(0)
        agg.put("t", 0, 0, 3.0)
        agg.barrier(0)
        w.commit()
        assert w.get("t", 0)[0] == 3.0
