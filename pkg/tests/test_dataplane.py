import socket
import threading
import time

import pytest
from hypothesis import given, strategies as st

from fwbench.dataplane import (DRAIN_TIMEOUT, DatagramConnection, FlowTracker,
                               FrameRecord, StopSignal, StreamConnection, Verdict,
                               decode_frame, encode_frame, frame_rng, next_frame_size,
                               run_cycle, send_within, tally, validate_frame)
from fwbench.errors import FrameTooSmall, SendTimeout, TooShort, ZeroClientId
from fwbench.metrics import CycleCounters
from fwbench.testcase import Family, FrameSpec, Protocol


def test_encode_example():
    data = encode_frame(FrameRecord(1, 64, 1))
    assert len(data) == 64
    assert data[:12] == bytes.fromhex("00000001" "00000040" "00000001")
    assert data[12:] == bytes(52)


def test_encode_too_small():
    with pytest.raises(FrameTooSmall):
        encode_frame(FrameRecord(3, 11, 1))


def test_decode_example():
    assert decode_frame(encode_frame(FrameRecord(1, 64, 1))) == FrameRecord(1, 64, 1)


def test_decode_errors():
    with pytest.raises(TooShort):
        decode_frame(bytes(8))
    with pytest.raises(ZeroClientId):
        decode_frame(bytes(12))


def test_wire_carries_low_seq_bits():
    rec = decode_frame(encode_frame(FrameRecord(2, 64, (1 << 32) + 5)))
    assert rec.seq == 5


def test_declared_size_differs_from_received():
    data = encode_frame(FrameRecord(1, 128, 1))[:120]
    assert decode_frame(data).frame_size == 128
    assert validate_frame(data, 1, 0).verdict is Verdict.SIZE_MISMATCH


records = st.builds(FrameRecord, st.integers(1, 2**32 - 1), st.integers(12, 1024),
                    st.integers(0, 2**32 - 1))


@given(records)
def test_codec_roundtrip(rec):
    data = encode_frame(rec)
    assert len(data) == rec.frame_size
    assert decode_frame(data) == rec


def _frames(client, seqs, size=64):
    return [encode_frame(FrameRecord(client, size, s)) for s in seqs]


def test_in_order_valid():
    flow = FlowTracker(1)
    assert [flow.check(f).verdict for f in _frames(1, [1, 2, 3])] == [Verdict.VALID] * 3


def test_gap():
    flow = FlowTracker(1)
    results = [flow.check(f) for f in _frames(1, [1, 2, 4])]
    assert [r.verdict for r in results] == [Verdict.VALID, Verdict.VALID, Verdict.GAP]
    assert results[2].missing == 1


def test_wrong_client():
    assert validate_frame(_frames(2, [1])[0], 1, 0).verdict is Verdict.WRONG_CLIENT


def test_precedence():
    bad = encode_frame(FrameRecord(2, 128, 9))[:100]
    assert validate_frame(bad, 1, 0).verdict is Verdict.WRONG_CLIENT
    bad = encode_frame(FrameRecord(1, 128, 9))[:100]
    assert validate_frame(bad, 1, 0).verdict is Verdict.SIZE_MISMATCH


def test_replayed_frame_is_corrupt():
    flow = FlowTracker(1)
    verdicts = [flow.check(f).verdict for f in _frames(1, [1, 2, 2])]
    assert verdicts[-1] is Verdict.CORRUPT
    assert validate_frame(b"\x00" * 5, 1, 0).verdict is Verdict.CORRUPT


def test_gap_across_wraparound():
    last = (1 << 32) - 1
    data = encode_frame(FrameRecord(1, 64, (1 << 32) + 2))
    r = validate_frame(data, 1, last)
    assert r.verdict is Verdict.GAP and r.missing == 2


def test_fixed_frame_size():
    rng = frame_rng(FrameSpec.fixed(512), 1)
    assert {next_frame_size(FrameSpec.fixed(512), rng) for _ in range(100)} == {512}


def test_ranged_uniform_mean():
    spec = FrameSpec.ranged(64, 1024, seed=12345)
    rng = frame_rng(spec, 1)
    draws = [next_frame_size(spec, rng) for _ in range(10**6)]
    assert min(draws) >= 64 and max(draws) <= 1024
    # uniform on the integers 64..1024 has mean (64 + 1024) / 2
    assert abs(sum(draws) / len(draws) - 544) / 544 < 0.01


def test_ranged_deterministic_per_client():
    spec = FrameSpec.ranged(64, 1024, seed=7)
    a = [next_frame_size(spec, r) for r in [frame_rng(spec, 3)] for _ in range(50)]
    b = [next_frame_size(spec, r) for r in [frame_rng(spec, 3)] for _ in range(50)]
    c = [next_frame_size(spec, r) for r in [frame_rng(spec, 4)] for _ in range(50)]
    assert a == b
    assert a != c


# loopback cycles ----------------------------------------------------------

@pytest.fixture
def tcp_echo():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen()
    stop = threading.Event()

    def serve():
        conn, _ = srv.accept()
        conn.settimeout(0.05)
        while not stop.is_set():
            try:
                data = conn.recv(4096)
            except socket.timeout:
                continue
            if not data:
                break
            conn.sendall(data)
        conn.close()

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    yield srv.getsockname()
    stop.set()
    srv.close()


def test_cycle_against_echo(tcp_echo):
    conn = StreamConnection.open(Protocol.TCP, Family.IPV4, tcp_echo)
    flow = FlowTracker(1)
    out = run_cycle(conn, FrameRecord(1, 256, 1), flow, StopSignal())
    conn.close()
    assert out.sent and out.received.verdict is Verdict.VALID
    assert out.bytes_sent == out.bytes_received == 256
    counters = CycleCounters(client_id=1)
    tally(counters, out)
    assert counters.mp4_valid_bytes == 256 and counters.consistent()


def test_no_echo_gives_not_received_after_drain():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen()
    conn = StreamConnection.open(Protocol.TCP, Family.IPV4, srv.getsockname())
    peer, _ = srv.accept()
    stop = StopSignal(drain=0.2)
    threading.Timer(0.3, stop.set).start()
    t0 = time.monotonic()
    out = run_cycle(conn, FrameRecord(1, 64, 1), FlowTracker(1), stop)
    elapsed = time.monotonic() - t0
    assert out.sent and out.received is None
    # blocked through the run, released only by the drain deadline
    assert elapsed >= 0.5
    conn.close()
    peer.close()
    srv.close()


def test_blocked_send_is_unsent():
    srv = socket.socket()
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4096)
    srv.bind(("127.0.0.1", 0))
    srv.listen()
    sock = socket.socket()
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 4096)
    sock.connect(srv.getsockname())
    peer, _ = srv.accept()  # never reads
    frame = encode_frame(FrameRecord(1, 1024, 1))
    with pytest.raises(SendTimeout):
        for _ in range(100000):
            send_within(sock, frame, 0.05)
    conn = StreamConnection(sock)
    t0 = time.monotonic()
    out = run_cycle(conn, FrameRecord(1, 1024, 2), FlowTracker(1), StopSignal())
    assert time.monotonic() - t0 >= 0.5
    assert not out.sent and out.received is None and out.bytes_sent == 0
    counters = CycleCounters()
    tally(counters, out)
    assert counters.mp1_unsent == 1 and counters.mp1_sent_ok == 0
    conn.close()
    peer.close()
    srv.close()


def test_udp_cycle_and_lost_reply():
    srv = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    srv.bind(("127.0.0.1", 0))
    conn = DatagramConnection.open(Protocol.UDP, Family.IPV4, srv.getsockname(), reply_timeout=0.2)
    flow = FlowTracker(1)

    def echo_once(drop=False):
        data, addr = srv.recvfrom(2048)
        if not drop:
            srv.sendto(data, addr)

    results = []
    for seq, drop in [(1, False), (2, True), (3, False)]:
        t = threading.Thread(target=echo_once, args=(drop,))
        t.start()
        results.append(run_cycle(conn, FrameRecord(1, 128, seq), flow, StopSignal()))
        t.join()
    assert results[0].received.verdict is Verdict.VALID
    assert results[1].sent and results[1].received is None
    assert results[2].received.verdict is Verdict.GAP and results[2].received.missing == 1
    conn.close()
    srv.close()


def test_drain_default():
    assert DRAIN_TIMEOUT == pytest.approx(1.0)
