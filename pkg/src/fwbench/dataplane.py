"""Data frames and the client side of the send/echo/receive cycle.

Every frame starts with a 12-byte header of three big-endian ``uint32``::

    client_id | frame_size | seq mod 2**32

followed by zero padding up to ``frame_size`` bytes. On stream transports
a frame is read as exactly ``frame_size`` bytes; on UDP it is one datagram.

Measurement points: MP1 client send, MP2 server receive, MP3 server echo,
MP4 client receive. This module owns MP1 and MP4.
"""
from __future__ import annotations

import enum
import logging
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass

from .errors import (ConnectionLost, FrameTooSmall, ProtocolUnavailable,
                     SendTimeout, TooShort, ZeroClientId)
from .metrics import CycleCounters
from .testcase import HEADER_SIZE, Family, FrameSpec, Protocol

log = logging.getLogger(__name__)

SEND_TIMEOUT = 0.5
DRAIN_TIMEOUT = 2 * SEND_TIMEOUT
#: how long a UDP client waits for its echo before declaring it lost
REPLY_TIMEOUT = SEND_TIMEOUT
POLL_INTERVAL = 0.05

_HEADER = struct.Struct("!III")
SEQ_MOD = 1 << 32
_SEQ_MASK = SEQ_MOD - 1


@dataclass(frozen=True)
class FrameRecord:
    client_id: int
    frame_size: int
    seq: int


def encode_frame(rec: FrameRecord) -> bytes:
    if rec.frame_size < HEADER_SIZE:
        raise FrameTooSmall(f"frame size {rec.frame_size} is below the {HEADER_SIZE}-byte header")
    header = _HEADER.pack(rec.client_id, rec.frame_size, rec.seq & _SEQ_MASK)
    return header + bytes(rec.frame_size - HEADER_SIZE)


def decode_frame(data: bytes) -> FrameRecord:
    """Parse the header. ``seq`` comes back as the 32-bit wire value and
    ``frame_size`` is the declared size, whatever ``len(data)`` is."""
    if len(data) < HEADER_SIZE:
        raise TooShort(f"{len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    client_id, frame_size, seq = _HEADER.unpack_from(data)
    if client_id == 0:
        raise ZeroClientId("client id 0 is reserved")
    return FrameRecord(client_id, frame_size, seq)


class Verdict(str, enum.Enum):
    VALID = "valid"
    WRONG_CLIENT = "wrong_client"
    SIZE_MISMATCH = "size_mismatch"
    GAP = "gap"
    CORRUPT = "corrupt"


@dataclass(frozen=True)
class ValidationResult:
    verdict: Verdict
    missing: int = 0
    seq: int | None = None

    @property
    def ok(self) -> bool:
        return self.verdict is Verdict.VALID


def seq_advance(wire_seq: int, last_seq: int) -> int:
    """How far ``wire_seq`` is past ``last_seq`` (1 means in order).

    Zero or negative means the frame is a replay or arrived late.
    """
    delta = (wire_seq - last_seq) & _SEQ_MASK
    return delta if delta < SEQ_MOD // 2 else delta - SEQ_MOD


def validate_frame(data: bytes, expected_client: int, last_seq: int) -> ValidationResult:
    """Judge one received frame against its flow.

    Precedence is wrong client, then size mismatch, then gap. A frame that
    does not advance the sequence (replayed or late) is ``CORRUPT``.
    """
    try:
        rec = decode_frame(data)
    except (TooShort, ZeroClientId):
        return ValidationResult(Verdict.CORRUPT)
    if rec.client_id != expected_client:
        return ValidationResult(Verdict.WRONG_CLIENT, seq=rec.seq)
    if len(data) != rec.frame_size:
        return ValidationResult(Verdict.SIZE_MISMATCH, seq=rec.seq)
    step = seq_advance(rec.seq, last_seq)
    if step == 1:
        return ValidationResult(Verdict.VALID, seq=rec.seq)
    if step > 1:
        return ValidationResult(Verdict.GAP, missing=step - 1, seq=rec.seq)
    return ValidationResult(Verdict.CORRUPT, seq=rec.seq)


class FlowTracker:
    """Per-flow validation state: the expected client and the last sequence
    number seen. Used on both ends of a connection."""

    def __init__(self, client_id: int | None = None, last_seq: int = 0):
        self.client_id = client_id
        self.last_seq = last_seq

    def check(self, data: bytes) -> ValidationResult:
        if self.client_id is None:
            try:
                self.client_id = decode_frame(data).client_id
            except (TooShort, ZeroClientId):
                return ValidationResult(Verdict.CORRUPT)
        result = validate_frame(data, self.client_id, self.last_seq)
        if result.verdict in (Verdict.VALID, Verdict.GAP):
            self.last_seq += seq_advance(result.seq, self.last_seq)
        return result


def frame_rng(spec: FrameSpec, client_id: int) -> random.Random:
    """Mersenne Twister stream for one client worker."""
    return random.Random((spec.seed or 0) ^ client_id)


def next_frame_size(spec: FrameSpec, rng: random.Random) -> int:
    if spec.is_ranged:
        return rng.randint(spec.min_bytes, spec.max_bytes)
    return spec.fixed_bytes


class StopSignal:
    """End-of-run flag plus the drain deadline that follows it."""

    def __init__(self, drain: float = DRAIN_TIMEOUT):
        self.drain = drain
        self._event = threading.Event()
        self.stopped_at: float | None = None

    def set(self) -> None:
        if not self._event.is_set():
            self.stopped_at = time.monotonic()
            self._event.set()

    def is_set(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout=None) -> bool:
        return self._event.wait(timeout)

    def expired(self) -> bool:
        return self.stopped_at is not None and time.monotonic() >= self.stopped_at + self.drain


# sockets ------------------------------------------------------------------

def family_af(family: Family) -> int:
    return socket.AF_INET6 if family is Family.IPV6 else socket.AF_INET


def loopback(family: Family) -> str:
    return "::1" if family is Family.IPV6 else "127.0.0.1"


def sctp_available(family: Family = Family.IPV4) -> bool:
    proto = getattr(socket, "IPPROTO_SCTP", None)
    if proto is None:
        return False
    try:
        socket.socket(family_af(family), socket.SOCK_STREAM, proto).close()
    except OSError:
        return False
    return True


def make_socket(protocol: Protocol, family: Family) -> socket.socket:
    af = family_af(family)
    if protocol is Protocol.UDP:
        return socket.socket(af, socket.SOCK_DGRAM)
    if protocol is Protocol.SCTP:
        proto = getattr(socket, "IPPROTO_SCTP", None)
        try:
            if proto is None:
                raise OSError("no IPPROTO_SCTP")
            return socket.socket(af, socket.SOCK_STREAM, proto)
        except OSError as exc:
            raise ProtocolUnavailable(f"SCTP not supported on this host: {exc}") from None
    sock = socket.socket(af, socket.SOCK_STREAM)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def send_within(sock: socket.socket, data: bytes, timeout: float) -> None:
    """Write all of ``data`` or raise :class:`SendTimeout` once ``timeout``
    has elapsed; the exception's ``sent`` attribute says how much got out."""
    deadline = time.monotonic() + timeout
    view = memoryview(data)
    sent = 0
    while sent < len(data):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            err = SendTimeout(f"{sent}/{len(data)} bytes sent within {timeout}s")
            err.sent = sent
            raise err
        sock.settimeout(remaining)
        try:
            sent += sock.send(view[sent:])
        except socket.timeout:
            continue
        except OSError as exc:
            raise ConnectionLost(str(exc)) from exc
    return None


class StreamConnection:
    """One TCP or SCTP data connection on the client side."""

    datagram = False

    def __init__(self, sock: socket.socket):
        self.sock = sock

    @classmethod
    def open(cls, protocol: Protocol, family: Family, endpoint, timeout: float = 10.0):
        sock = make_socket(protocol, family)
        sock.settimeout(timeout)
        try:
            sock.connect(tuple(endpoint))
        except OSError as exc:
            sock.close()
            raise ConnectionLost(f"cannot connect to {endpoint}: {exc}") from exc
        return cls(sock)

    def send(self, data: bytes, timeout: float) -> None:
        send_within(self.sock, data, timeout)

    def receive(self, size: int, stop: StopSignal, reply_timeout=None) -> bytes | None:
        buf = bytearray()
        self.sock.settimeout(POLL_INTERVAL)
        while len(buf) < size:
            if stop.expired():
                return None
            try:
                chunk = self.sock.recv(size - len(buf))
            except socket.timeout:
                continue
            except OSError as exc:
                raise ConnectionLost(str(exc)) from exc
            if not chunk:
                raise ConnectionLost("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class DatagramConnection:
    """A connected UDP socket; one frame per datagram."""

    datagram = True

    def __init__(self, sock: socket.socket, reply_timeout: float = REPLY_TIMEOUT):
        self.sock = sock
        self.reply_timeout = reply_timeout

    @classmethod
    def open(cls, protocol: Protocol, family: Family, endpoint, reply_timeout: float = REPLY_TIMEOUT):
        sock = make_socket(Protocol.UDP, family)
        sock.connect(tuple(endpoint))
        return cls(sock, reply_timeout)

    def send(self, data: bytes, timeout: float) -> None:
        self.sock.settimeout(timeout)
        try:
            self.sock.send(data)
        except socket.timeout:
            err = SendTimeout(f"datagram not sent within {timeout}s")
            err.sent = 0
            raise err from None
        except ConnectionRefusedError:
            pass  # ICMP unreachable from an earlier datagram; treat as loss
        except OSError as exc:
            raise ConnectionLost(str(exc)) from exc

    def receive(self, size: int, stop: StopSignal, reply_timeout=None) -> bytes | None:
        deadline = time.monotonic() + (self.reply_timeout if reply_timeout is None else reply_timeout)
        while True:
            now = time.monotonic()
            if now >= deadline or stop.expired():
                return None
            self.sock.settimeout(min(POLL_INTERVAL, deadline - now))
            try:
                return self.sock.recv(65535)
            except socket.timeout:
                continue
            except ConnectionRefusedError:
                continue
            except OSError as exc:
                raise ConnectionLost(str(exc)) from exc

    def close(self):
        self.sock.close()


def open_connection(protocol: Protocol, family: Family, endpoint, reply_timeout: float = REPLY_TIMEOUT):
    if protocol is Protocol.UDP:
        return DatagramConnection.open(protocol, family, endpoint, reply_timeout)
    return StreamConnection.open(protocol, family, endpoint)


# the cycle ----------------------------------------------------------------

@dataclass(frozen=True)
class CycleOutcome:
    sent: bool
    received: ValidationResult | None
    bytes_sent: int
    bytes_received: int
    latency: float
    #: echoes of earlier frames that showed up while waiting (UDP only)
    late: tuple[tuple[ValidationResult, int], ...] = ()


def run_cycle(conn, rec: FrameRecord, flow: FlowTracker, stop: StopSignal,
              send_timeout: float = SEND_TIMEOUT) -> CycleOutcome:
    """Send one frame (MP1) and wait for its echo (MP4).

    Stream reads have no timeout of their own and only give up once the
    drain deadline after ``stop`` has passed. UDP echoes of older frames
    that arrive meanwhile are validated and reported in ``late``.
    """
    data = encode_frame(rec)
    t0 = time.monotonic()
    try:
        conn.send(data, send_timeout)
    except SendTimeout as exc:
        if getattr(exc, "sent", 0):
            # a partial frame leaves the byte stream unrecoverable
            raise ConnectionLost(f"stream desynchronized after partial send: {exc}") from exc
        return CycleOutcome(False, None, 0, 0, 0.0)

    late = []
    while True:
        reply = conn.receive(rec.frame_size, stop)
        if reply is None:
            return CycleOutcome(True, None, len(data), 0, 0.0, tuple(late))
        result = flow.check(reply)
        if conn.datagram and result.seq is not None and result.verdict is not Verdict.WRONG_CLIENT \
                and seq_advance(result.seq, rec.seq) < 0:
            late.append((result, len(reply)))
            continue
        return CycleOutcome(True, result, len(data), len(reply), time.monotonic() - t0, tuple(late))


def _tally_received(counters: CycleCounters, result: ValidationResult, nbytes: int):
    counters.mp4_received += 1
    counters.mp4_bytes += nbytes
    if result.ok:
        counters.mp4_valid += 1
        counters.mp4_valid_bytes += nbytes
    else:
        counters.mp4_invalid += 1
    if result.verdict is Verdict.GAP:
        counters.gap_events += 1
        counters.gap_total_missing += result.missing


def tally(counters: CycleCounters, outcome: CycleOutcome) -> None:
    counters.cycles += 1
    if outcome.sent:
        counters.mp1_sent_ok += 1
        counters.mp1_bytes += outcome.bytes_sent
    else:
        counters.mp1_unsent += 1
    for result, nbytes in outcome.late:
        _tally_received(counters, result, nbytes)
    if outcome.received is not None:
        _tally_received(counters, outcome.received, outcome.bytes_received)
        counters.latency_total += outcome.latency


class ClientWorker(threading.Thread):
    """One client thread: connect, wait for the start signal, then cycle
    until stopped (or for ``max_cycles`` frames when replaying a fixed
    workload)."""

    def __init__(self, client_id: int, frame: FrameSpec, protocol: Protocol, family: Family,
                 endpoint, stop: StopSignal, go: threading.Event | None = None,
                 send_timeout: float = SEND_TIMEOUT, reply_timeout: float = REPLY_TIMEOUT,
                 max_cycles: int | None = None):
        super().__init__(name=f"client-{client_id}", daemon=True)
        self.client_id = client_id
        self.frame = frame
        self.protocol = protocol
        self.family = family
        self.endpoint = endpoint
        self.stop = stop
        self.go = go
        self.send_timeout = send_timeout
        self.reply_timeout = reply_timeout
        self.max_cycles = max_cycles
        self.counters = CycleCounters(client_id=client_id)
        self.connected = threading.Event()
        self.error: Exception | None = None
        self.conn = None

    def connect(self):
        self.conn = open_connection(self.protocol, self.family, self.endpoint, self.reply_timeout)
        self.connected.set()

    def run(self):
        try:
            if self.conn is None:
                self.connect()
            if self.go is not None:
                while not self.go.wait(POLL_INTERVAL):
                    if self.stop.is_set():
                        return
            self._cycle_loop()
        except ConnectionLost as exc:
            log.warning("client %d lost its connection: %s", self.client_id, exc)
            self.counters.connection_lost = True
            self.error = exc
        except Exception as exc:
            log.exception("client %d failed", self.client_id)
            self.counters.connection_lost = True
            self.error = exc
        finally:
            if self.conn is not None:
                self.conn.close()

    def _cycle_loop(self):
        rng = frame_rng(self.frame, self.client_id)
        flow = FlowTracker(self.client_id)
        seq = 1
        while not self.stop.is_set():
            if self.max_cycles is not None and seq > self.max_cycles:
                break
            rec = FrameRecord(self.client_id, next_frame_size(self.frame, rng), seq)
            outcome = run_cycle(self.conn, rec, flow, self.stop, self.send_timeout)
            tally(self.counters, outcome)
            seq += 1
            if outcome.sent and outcome.received is None and not self.conn.datagram:
                break  # drain deadline hit while reading
