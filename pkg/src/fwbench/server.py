"""Echo server: MP2 (receive and validate) and MP3 (echo back).

Stream protocols are served either by one thread per connection or by a
single thread multiplexing all connections through the OS readiness API
(``selectors.DefaultSelector`` is epoll on Linux). UDP always uses one
thread.
"""
from __future__ import annotations

import logging
import selectors
import socket
import threading
import time
from dataclasses import dataclass, field

from . import control
from .dataplane import (DRAIN_TIMEOUT, POLL_INTERVAL, SEND_TIMEOUT, FlowTracker,
                        StopSignal, decode_frame, loopback, make_socket, send_within)
from .errors import (BindFailed, ConnectionLost, ProtocolUnavailable,
                     SendTimeout, TooShort, ZeroClientId)
from .metrics import CycleCounters, SystemSampler
from .testcase import HEADER_SIZE, MAX_FRAME, Handling, Protocol, TestCase

log = logging.getLogger(__name__)

#: the server outlives the clients' drain so it never cuts off a final echo
SERVER_DRAIN = DRAIN_TIMEOUT + 1.0


@dataclass
class ServerStats:
    strategy: str
    connections: list[CycleCounters] = field(default_factory=list)
    connection_count: int = 0
    refused: int = 0

    def by_client(self) -> dict[int, CycleCounters]:
        return {c.client_id: c for c in self.connections}

    def to_dict(self) -> dict:
        return {"strategy": self.strategy,
                "connections": [c.to_dict() for c in self.connections],
                "connection_count": self.connection_count,
                "refused": self.refused}

    @classmethod
    def from_dict(cls, d: dict) -> "ServerStats":
        return cls(d["strategy"], [CycleCounters.from_dict(c) for c in d.get("connections", [])],
                   d.get("connection_count", 0), d.get("refused", 0))


def _record_mp2(counters: CycleCounters, flow: FlowTracker, frame: bytes):
    result = flow.check(frame)
    counters.mp2_received += 1
    counters.mp2_bytes += len(frame)
    if result.ok:
        counters.mp2_valid += 1
    else:
        counters.mp2_invalid += 1
    if counters.client_id == 0 and flow.client_id is not None:
        counters.client_id = flow.client_id
    return result


def bind_listener(case: TestCase, host: str | None = None, port: int = 0) -> socket.socket:
    """Open and bind the data socket; only after this may ServerReady go out."""
    host = host or loopback(case.family)
    try:
        sock = make_socket(case.protocol, case.family)
    except ProtocolUnavailable:
        raise
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        if case.protocol.is_stream:
            sock.listen(max(case.n, 16))
    except OSError as exc:
        sock.close()
        raise BindFailed(f"cannot bind data socket on {host}:{port}: {exc}") from exc
    return sock


def _read_exact(sock, size, stop: StopSignal) -> bytes | None:
    buf = bytearray()
    while len(buf) < size:
        if stop.expired():
            return None
        try:
            chunk = sock.recv(size - len(buf))
        except socket.timeout:
            continue
        except OSError:
            return None
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def _stream_echo(sock: socket.socket, counters: CycleCounters, stop: StopSignal,
                 max_frame: int, send_timeout: float):
    flow = FlowTracker()
    try:
        while True:
            sock.settimeout(POLL_INTERVAL)
            header = _read_exact(sock, HEADER_SIZE, stop)
            if header is None:
                return
            size = int.from_bytes(header[4:8], "big")
            if not HEADER_SIZE <= size <= max_frame:
                counters.mp2_received += 1
                counters.mp2_invalid += 1
                counters.mp2_bytes += len(header)
                log.warning("bad frame size %d on connection, closing", size)
                return
            rest = _read_exact(sock, size - HEADER_SIZE, stop)
            if rest is None:
                return
            frame = header + rest
            _record_mp2(counters, flow, frame)
            try:
                send_within(sock, frame, send_timeout)
            except SendTimeout as exc:
                counters.mp3_unsent += 1
                if getattr(exc, "sent", 0):
                    return
                continue
            except ConnectionLost:
                return
            counters.mp3_sent_ok += 1
            counters.mp3_bytes += len(frame)
    finally:
        try:
            sock.close()
        except OSError:
            pass


def _accept_one(listener, stats, capacity):
    try:
        conn, _ = listener.accept()
    except (BlockingIOError, socket.timeout, InterruptedError):
        return None
    if stats.connection_count >= capacity:
        stats.refused += 1
        conn.close()
        return None
    stats.connection_count += 1
    if conn.family in (socket.AF_INET, socket.AF_INET6) and conn.proto in (0, socket.IPPROTO_TCP):
        try:
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass
    return conn


def serve_threaded(listener: socket.socket, case: TestCase, stop: StopSignal,
                   max_frame: int = MAX_FRAME, send_timeout: float = SEND_TIMEOUT) -> ServerStats:
    """Accept up to ``case.n`` connections, each echoed by its own thread."""
    stats = ServerStats(Handling.THREAD.value)
    workers: list[tuple[threading.Thread, CycleCounters]] = []
    listener.settimeout(POLL_INTERVAL)
    while not stop.expired():
        if stop.is_set() and all(not t.is_alive() for t, _ in workers):
            break
        conn = _accept_one(listener, stats, case.n)
        if conn is None:
            continue
        counters = CycleCounters()
        t = threading.Thread(target=_stream_echo, args=(conn, counters, stop, max_frame, send_timeout),
                             name=f"echo-{len(workers) + 1}", daemon=True)
        t.start()
        workers.append((t, counters))
    for t, _ in workers:
        t.join()
    stats.connections = sorted((c for _, c in workers), key=lambda c: c.client_id)
    return stats


class _Conn:
    __slots__ = ("sock", "inbuf", "need", "outbuf", "out_started", "out_sent",
                 "flow", "counters")

    def __init__(self, sock):
        self.sock = sock
        self.inbuf = bytearray()
        self.need = HEADER_SIZE
        self.outbuf = b""
        self.out_started = 0.0
        self.out_sent = 0
        self.flow = FlowTracker()
        self.counters = CycleCounters()


def serve_multiplexed(listener: socket.socket, case: TestCase, stop: StopSignal,
                      max_frame: int = MAX_FRAME, send_timeout: float = SEND_TIMEOUT) -> ServerStats:
    """Serve every connection from this one thread via readiness events.

    Each connection holds a reassembly buffer of at most one frame and an
    outbound queue of at most one frame; reading pauses while an echo is
    still pending.
    """
    stats = ServerStats(Handling.MULTIPLEXED.value)
    sel = selectors.DefaultSelector()
    listener.setblocking(False)
    sel.register(listener, selectors.EVENT_READ, None)
    conns: list[_Conn] = []
    open_conns: set[_Conn] = set()

    def close(c: _Conn):
        if c in open_conns:
            open_conns.discard(c)
            sel.unregister(c.sock)
            c.sock.close()

    def flush(c: _Conn):
        try:
            c.out_sent += c.sock.send(c.outbuf[c.out_sent:])
        except BlockingIOError:
            pass
        except OSError:
            close(c)
            return
        if c.out_sent == len(c.outbuf):
            c.counters.mp3_sent_ok += 1
            c.counters.mp3_bytes += len(c.outbuf)
            c.outbuf = b""
            c.out_sent = 0
            sel.modify(c.sock, selectors.EVENT_READ, c)
        else:
            sel.modify(c.sock, selectors.EVENT_WRITE, c)

    def read(c: _Conn):
        try:
            chunk = c.sock.recv(c.need - len(c.inbuf))
        except BlockingIOError:
            return
        except OSError:
            close(c)
            return
        if not chunk:
            close(c)
            return
        c.inbuf += chunk
        if len(c.inbuf) < c.need:
            return
        if c.need == HEADER_SIZE:
            size = int.from_bytes(c.inbuf[4:8], "big")
            if not HEADER_SIZE <= size <= max_frame:
                c.counters.mp2_received += 1
                c.counters.mp2_invalid += 1
                c.counters.mp2_bytes += len(c.inbuf)
                close(c)
                return
            c.need = size
            if len(c.inbuf) < c.need:
                return
        frame = bytes(c.inbuf)
        c.inbuf.clear()
        c.need = HEADER_SIZE
        _record_mp2(c.counters, c.flow, frame)
        c.outbuf = frame
        c.out_sent = 0
        c.out_started = time.monotonic()
        flush(c)

    try:
        while not stop.expired():
            if stop.is_set() and not open_conns:
                break
            for key, mask in sel.select(POLL_INTERVAL):
                if key.data is None:
                    while True:
                        sock = _accept_one(listener, stats, case.n)
                        if sock is None:
                            break
                        sock.setblocking(False)
                        c = _Conn(sock)
                        conns.append(c)
                        open_conns.add(c)
                        sel.register(sock, selectors.EVENT_READ, c)
                        if stats.connection_count >= case.n:
                            break
                    continue
                c = key.data
                if c not in open_conns:
                    continue
                if mask & selectors.EVENT_WRITE and c.outbuf:
                    flush(c)
                elif mask & selectors.EVENT_READ:
                    read(c)
            now = time.monotonic()
            for c in list(open_conns):
                if c.outbuf and now - c.out_started > send_timeout:
                    c.counters.mp3_unsent += 1
                    if c.out_sent:
                        close(c)
                    else:
                        c.outbuf = b""
                        sel.modify(c.sock, selectors.EVENT_READ, c)
    finally:
        for c in list(open_conns):
            close(c)
        sel.close()
    stats.connections = sorted((c.counters for c in conns), key=lambda c: c.client_id)
    return stats


def serve_datagram(sock: socket.socket, case: TestCase, stop: StopSignal,
                   send_timeout: float = SEND_TIMEOUT) -> ServerStats:
    """Validate and echo each datagram to its source; counters per client id.

    Undecodable datagrams are tallied under client id 0 and not echoed.
    """
    stats = ServerStats("datagram")
    per_client: dict[int, tuple[CycleCounters, FlowTracker]] = {}
    sock.settimeout(POLL_INTERVAL)
    while not stop.expired():
        try:
            data, addr = sock.recvfrom(65535)
        except socket.timeout:
            continue
        except OSError:
            continue
        try:
            cid = decode_frame(data).client_id
        except (TooShort, ZeroClientId):
            cid = 0
        if cid not in per_client:
            per_client[cid] = (CycleCounters(client_id=cid), FlowTracker(cid or None))
        counters, flow = per_client[cid]
        if cid == 0:
            counters.mp2_received += 1
            counters.mp2_invalid += 1
            counters.mp2_bytes += len(data)
            continue
        _record_mp2(counters, flow, data)
        sock.settimeout(send_timeout)
        try:
            sock.sendto(data, addr)
            counters.mp3_sent_ok += 1
            counters.mp3_bytes += len(data)
        except socket.timeout:
            counters.mp3_unsent += 1
        except OSError:
            counters.mp3_unsent += 1
        sock.settimeout(POLL_INTERVAL)
    stats.connections = sorted((c for c, _ in per_client.values()), key=lambda c: c.client_id)
    stats.connection_count = len([c for c in per_client if c])
    return stats


def serve(listener, case: TestCase, stop: StopSignal, **kw) -> ServerStats:
    if case.protocol is Protocol.UDP:
        kw.pop("max_frame", None)
        return serve_datagram(listener, case, stop, **kw)
    if case.handling is Handling.THREAD:
        return serve_threaded(listener, case, stop, **kw)
    return serve_multiplexed(listener, case, stop, **kw)


class EchoServer:
    """Bind, serve in a background thread, stop, and collect stats."""

    def __init__(self, case: TestCase, host: str | None = None, port: int = 0,
                 drain: float = SERVER_DRAIN, max_frame: int = MAX_FRAME):
        self.case = case
        self.listener = bind_listener(case, host, port)
        self.port = self.listener.getsockname()[1]
        self.stop_signal = StopSignal(drain)
        self.max_frame = max_frame
        self.stats: ServerStats | None = None
        self.error: Exception | None = None
        self._thread = threading.Thread(target=self._run, name="echo-server", daemon=True)

    def _run(self):
        try:
            self.stats = serve(self.listener, self.case, self.stop_signal, max_frame=self.max_frame)
        except Exception as exc:
            log.exception("server loop failed")
            self.error = exc
        finally:
            self.listener.close()

    def start(self) -> "EchoServer":
        self._thread.start()
        return self

    def stop(self):
        self.stop_signal.set()

    def join(self, timeout=None) -> ServerStats | None:
        self._thread.join(timeout)
        return self.stats

    @property
    def running(self) -> bool:
        return self._thread.is_alive()


class ServerAgent(control.Agent):
    """Control-session handler for the server role."""

    role = "server"

    def __init__(self, host: str | None = None, sample_interval: float = 1.0):
        super().__init__()
        self.host = host
        self.sample_interval = sample_interval
        self.server: EchoServer | None = None
        self.sampler: SystemSampler | None = None

    def on_configure_server(self, msg: control.ConfigureServer):
        if self.server is not None:
            return control.ErrorReply("busy", "server already configured")
        try:
            self.server = EchoServer(msg.case, self.host).start()
        except ProtocolUnavailable as exc:
            return control.ErrorReply("protocol_unavailable", str(exc))
        except BindFailed as exc:
            return control.ErrorReply("bind_failed", str(exc))
        self.sampler = SystemSampler(self.sample_interval).start()
        return control.ServerReady(self.server.port)

    def on_start(self, msg):
        return None

    def on_stop_cycle(self, msg):
        if self.server is not None:
            self.server.stop()
        return None

    def on_stats_request(self, msg):
        if self.server is None:
            return control.ErrorReply("not_configured", "no experiment configured")
        self.server.stop()
        stats = self.server.join(SERVER_DRAIN + 5.0)
        samples = self.sampler.stop() if self.sampler else []
        if stats is None:
            return control.ErrorReply("stats_unavailable", str(self.server.error or "server still draining"))
        body = stats.to_dict()
        body["samples"] = [s.to_dict() for s in samples]
        return control.StatsReport(body)

    def teardown(self):
        if self.server is not None:
            self.server.stop()
            self.server.join(SERVER_DRAIN + 5.0)
        if self.sampler is not None:
            self.sampler.stop()
        self.server = None
        self.sampler = None
