"""Control plane between the client (orchestrator), gateway and server.

Messages travel as newline-delimited JSON objects over one persistent TCP
connection per peer, separate from every data connection. The ``type`` key
names the variant; the remaining keys are its fields.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import platform
import socket
import threading
import time
from dataclasses import dataclass

from .errors import (BindFailed, ConfigRejected, ConnectionLost, ControlTimeout,
                     MalformedFrame, PeerUnreachable, ProtocolError,
                     SchemaViolation, UnknownVariant,
                     ValidationError)
from .testcase import TestCase, validate

log = logging.getLogger(__name__)

GATEWAY_PORT = 7001
SERVER_PORT = 7002
CONTROL_TIMEOUT = 10.0
MAX_LINE = 1 << 20

PHASES = ("Idle", "GatewayConfigured", "ServerConfigured", "Running", "Draining", "Complete")


@dataclass(frozen=True)
class ConfigureGateway:
    case: TestCase
    client_addr: str
    server_addr: str
    #: one address per client; defaults to ``client_addr`` repeated n times
    client_addrs: list | None = None


@dataclass(frozen=True)
class GatewayReady:
    #: client-facing port of the userspace forwarder, None when routing in-kernel
    forward_port: int | None = None


@dataclass(frozen=True)
class ConfigureServer:
    case: TestCase


@dataclass(frozen=True)
class ServerReady:
    data_port: int


@dataclass(frozen=True)
class Start:
    #: server data endpoint ``[host, port]``, needed by the userspace forwarder
    upstream: list | None = None


@dataclass(frozen=True)
class StopCycle:
    pass


@dataclass(frozen=True)
class StatsRequest:
    pass


@dataclass(frozen=True)
class StatsReport:
    stats: dict


@dataclass(frozen=True)
class Teardown:
    pass


@dataclass(frozen=True)
class TeardownDone:
    rules_remaining: int = 0


@dataclass(frozen=True)
class ErrorReply:
    code: str
    message: str = ""


VARIANTS: dict[str, type] = {cls.__name__: cls for cls in (
    ConfigureGateway, GatewayReady, ConfigureServer, ServerReady, Start, StopCycle,
    StatsRequest, StatsReport, Teardown, TeardownDone, ErrorReply)}

# field name -> (accepted JSON types, decoder)
_FIELD_TYPES = {
    "case": ((dict,), TestCase.from_dict),
    "client_addr": ((str,), None),
    "server_addr": ((str,), None),
    "client_addrs": ((list, type(None)), None),
    "forward_port": ((int, type(None)), None),
    "data_port": ((int,), None),
    "upstream": ((list, type(None)), None),
    "stats": ((dict,), None),
    "rules_remaining": ((int,), None),
    "code": ((str,), None),
    "message": ((str,), None),
}


def encode_message(msg) -> bytes:
    name = type(msg).__name__
    if name not in VARIANTS:
        raise TypeError(f"not a control message: {msg!r}")
    body = {"type": name}
    for f in dataclasses.fields(msg):
        value = getattr(msg, f.name)
        body[f.name] = value.to_dict() if isinstance(value, TestCase) else value
    return (json.dumps(body, separators=(",", ":"), sort_keys=True) + "\n").encode()


def decode_message(line: bytes | str):
    if isinstance(line, bytes):
        try:
            line = line.decode()
        except UnicodeDecodeError as exc:
            raise MalformedFrame(f"not UTF-8: {exc}") from None
    if line.endswith("\n"):
        line = line[:-1]
    if "\n" in line:
        raise MalformedFrame("interior newline in control line")
    try:
        body = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedFrame(f"cannot parse control line: {exc}") from None
    if not isinstance(body, dict) or not isinstance(body.get("type"), str):
        raise SchemaViolation("control line must be an object with a string 'type'")
    name = body.pop("type")
    cls = VARIANTS.get(name)
    if cls is None:
        raise UnknownVariant(f"unknown message type {name!r}")
    kwargs = {}
    names = set()
    for f in dataclasses.fields(cls):
        names.add(f.name)
        if f.name not in body:
            if f.default is dataclasses.MISSING:
                raise SchemaViolation(f"{name} lacks field {f.name!r}")
            continue
        value = body[f.name]
        types, decoder = _FIELD_TYPES[f.name]
        if not isinstance(value, types) or isinstance(value, bool):
            raise SchemaViolation(f"{name}.{f.name} has wrong type {type(value).__name__}")
        if decoder is not None:
            try:
                value = decoder(value)
            except (ValidationError, KeyError, TypeError, ValueError) as exc:
                raise SchemaViolation(f"{name}.{f.name}: {exc}") from None
        kwargs[f.name] = value
    extra = set(body) - names
    if extra:
        raise SchemaViolation(f"{name} has unexpected fields {sorted(extra)}")
    return cls(**kwargs)


class LineChannel:
    """Blocking newline-framed message channel over a stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buf = bytearray()
        self._lock = threading.Lock()

    def send(self, msg) -> None:
        data = encode_message(msg)
        with self._lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise ConnectionLost(f"control connection lost: {exc}") from exc

    def recv_line(self, timeout: float | None) -> bytes | None:
        """Next line, or None on orderly EOF."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while b"\n" not in self._buf:
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise socket.timeout()
                self.sock.settimeout(remaining)
            else:
                self.sock.settimeout(None)
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                raise
            except OSError as exc:
                raise ConnectionLost(f"control connection lost: {exc}") from exc
            if not chunk:
                return None
            self._buf += chunk
            if len(self._buf) > MAX_LINE and b"\n" not in self._buf:
                raise MalformedFrame("control line exceeds size limit")
        idx = self._buf.index(b"\n")
        line = bytes(self._buf[:idx + 1])
        del self._buf[:idx + 1]
        return line

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def _snake(name: str) -> str:
    return "".join("_" + ch.lower() if ch.isupper() else ch for ch in name).lstrip("_")


class Agent:
    """Role-specific message handler behind a :class:`ControlService`.

    Subclasses implement ``on_<message_name>`` methods (``on_configure_server``
    and so on) returning a reply message or None, plus :meth:`teardown`.
    """

    role = "peer"

    def __init__(self):
        self.phase = "Idle"

    def handle(self, msg):
        if isinstance(msg, Teardown):
            self.teardown()
            self.phase = "Idle"
            return TeardownDone(self.rules_remaining())
        method = getattr(self, "on_" + _snake(type(msg).__name__), None)
        if method is None:
            return ErrorReply("unexpected", f"{self.role} does not handle {type(msg).__name__}")
        try:
            reply = method(msg)
        except Exception as exc:
            log.exception("%s failed handling %s", self.role, type(msg).__name__)
            reply = ErrorReply("internal", f"{type(exc).__name__}: {exc}")
        if isinstance(reply, ErrorReply):
            self.phase = "Idle"
        return reply

    def teardown(self):
        pass

    def rules_remaining(self) -> int:
        return 0


class ControlService:
    """Listens on a control port and runs one session at a time.

    A second concurrent session receives ``ErrorReply(busy)`` and is closed.
    When a session's connection drops, the agent is torn down so no
    experiment state outlives its orchestrator.
    """

    def __init__(self, agent: Agent, host: str = "127.0.0.1", port: int = 0,
                 max_sessions: int | None = None):
        self.agent = agent
        self.max_sessions = max_sessions
        family = socket.AF_INET6 if ":" in host else socket.AF_INET
        self.sock = socket.socket(family, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self.sock.bind((host, port))
            self.sock.listen(8)
        except OSError as exc:
            self.sock.close()
            raise BindFailed(f"cannot bind control port {host}:{port}: {exc}") from exc
        self.address = self.sock.getsockname()[:2]
        self._busy = threading.Lock()
        self._closed = threading.Event()
        self.sessions_done = 0
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.address[1]

    def serve_forever(self):
        self.sock.settimeout(0.1)
        while not self._closed.is_set():
            try:
                conn, peer = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            if not self._busy.acquire(blocking=False):
                chan = LineChannel(conn)
                try:
                    chan.send(ErrorReply("busy", "another control session is active"))
                except ConnectionLost:
                    pass
                chan.close()
                continue
            threading.Thread(target=self._session, args=(conn,), daemon=True,
                             name=f"{self.agent.role}-session").start()
        self.sock.close()

    def _session(self, conn):
        chan = LineChannel(conn)
        try:
            while True:
                try:
                    line = chan.recv_line(None)
                except (ConnectionLost, MalformedFrame):
                    break
                if line is None:
                    break
                try:
                    msg = decode_message(line)
                except ProtocolError as exc:
                    chan.send(ErrorReply(type(exc).__name__, str(exc)))
                    continue
                reply = self.agent.handle(msg)
                if reply is not None:
                    chan.send(reply)
        except ConnectionLost:
            pass
        finally:
            try:
                self.agent.teardown()
            except Exception:
                log.exception("teardown after session end failed")
            chan.close()
            self.sessions_done += 1
            self._busy.release()
            if self.max_sessions is not None and self.sessions_done >= self.max_sessions:
                self._closed.set()

    def start(self) -> "ControlService":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True,
                                        name=f"{self.agent.role}-control")
        self._thread.start()
        return self

    def close(self):
        self._closed.set()
        if self._thread is not None:
            self._thread.join(2.0)

    def wait(self, timeout=None) -> bool:
        return self._closed.wait(timeout)


class ControlClient:
    """Orchestrator side of one control connection."""

    def __init__(self, name: str, address, timeout: float = CONTROL_TIMEOUT):
        self.name = name
        self.timeout = timeout
        host, port = address
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise PeerUnreachable(f"{name} control port {host}:{port} unreachable: {exc}") from exc
        self.chan = LineChannel(sock)

    def send(self, msg) -> None:
        self.chan.send(msg)

    def receive(self, phase: str, timeout: float | None = None):
        try:
            line = self.chan.recv_line(self.timeout if timeout is None else timeout)
        except socket.timeout:
            raise ControlTimeout(f"{self.name} {phase}") from None
        if line is None:
            raise ConnectionLost(f"{self.name} closed the control connection during {phase}")
        return decode_message(line)

    def request(self, msg, expect: type, phase: str, timeout: float | None = None):
        self.send(msg)
        reply = self.receive(phase, timeout)
        if isinstance(reply, ErrorReply):
            raise ConfigRejected(self.name, reply.code, reply.message)
        if not isinstance(reply, expect):
            raise SchemaViolation(f"{self.name} answered {type(reply).__name__}, expected {expect.__name__}")
        return reply

    def close(self):
        self.chan.close()


def orchestrate(case: TestCase, gateway_addr, server_addr, *, client_addr: str | None = None,
                server_data_host: str | None = None, gateway_data_host: str | None = None,
                repetition: int = 0,
                control_timeout: float = CONTROL_TIMEOUT, sample_interval: float = 1.0,
                send_timeout: float | None = None, reply_timeout: float | None = None,
                max_cycles: int | None = None):
    """Run one experiment end to end and return its :class:`RunReport`.

    ``gateway_addr`` and ``server_addr`` are control endpoints. Pass
    ``gateway_addr=None`` to talk to the server directly. Data connections
    go to the control hosts unless those belong to the other address family
    (then loopback of the case's family) or ``*_data_host`` overrides them.
    Whatever fails,
    both peers receive Teardown before this returns or raises.
    """
    from .dataplane import (DRAIN_TIMEOUT, REPLY_TIMEOUT, SEND_TIMEOUT, ClientWorker,
                            StopSignal, loopback)
    from .metrics import RunReport, SystemSample, SystemSampler

    case = validate(case)
    send_timeout = SEND_TIMEOUT if send_timeout is None else send_timeout
    reply_timeout = REPLY_TIMEOUT if reply_timeout is None else reply_timeout
    report = RunReport(case=case, repetition=repetition, complete=False)
    report.notes.append(f"client host: {platform.node()} {platform.platform()}")
    trace = report.phase_trace

    def phase(name):
        trace.append((name, time.time()))
        log.debug("phase %s", name)

    phase("Idle")
    peers: dict[str, ControlClient] = {}
    workers: list = []
    sampler = None
    stop = StopSignal(DRAIN_TIMEOUT)
    server_host = server_data_host or _data_host(server_addr[0], case.family)
    gateway_host = None
    if gateway_addr is not None:
        gateway_host = gateway_data_host or _data_host(gateway_addr[0], case.family)
    client_addr = client_addr or loopback(case.family)

    try:
        if gateway_addr is not None:
            peers["gateway"] = ControlClient("gateway", gateway_addr, control_timeout)
            ready = peers["gateway"].request(
                ConfigureGateway(case, client_addr, server_host), GatewayReady, "gateway configuration")
            phase("GatewayConfigured")
        else:
            ready = GatewayReady()

        peers["server"] = ControlClient("server", server_addr, control_timeout)
        try:
            sready = peers["server"].request(ConfigureServer(case), ServerReady, "server configuration")
        except ConfigRejected as exc:
            if exc.code == "protocol_unavailable":
                report.skipped = exc.message
                report.notes.append(f"skipped: {exc.message}")
                return report
            raise
        phase("ServerConfigured")

        data_endpoint = (server_host, sready.data_port)
        if ready.forward_port is not None:
            data_endpoint = (gateway_host, ready.forward_port)
            peers["gateway"].send(Start(upstream=[server_host, sready.data_port]))
        elif "gateway" in peers:
            peers["gateway"].send(Start())
        peers["server"].send(Start())
        phase("Running")

        go = threading.Event()
        for cid in range(1, case.n + 1):
            w = ClientWorker(cid, case.frame, case.protocol, case.family, data_endpoint, stop, go,
                             send_timeout=send_timeout, reply_timeout=reply_timeout,
                             max_cycles=max_cycles)
            w.connect()
            workers.append(w)
        for w in workers:
            w.start()
        sampler = SystemSampler(sample_interval).start()
        t0 = time.monotonic()
        go.set()
        if max_cycles is None:
            time.sleep(case.t)
        else:
            deadline = t0 + case.t
            while time.monotonic() < deadline and any(w.is_alive() for w in workers):
                time.sleep(0.01)
        report.duration = time.monotonic() - t0
        stop.set()
        for p in peers.values():
            p.send(StopCycle())
        phase("Draining")

        for w in workers:
            w.join(DRAIN_TIMEOUT + send_timeout + 5.0)
        report.samples["client"] = sampler.stop()
        sampler = None
        report.clients = [w.counters for w in workers]
        if any(w.is_alive() for w in workers):
            report.notes.append("some client workers did not finish draining")
        lost = [w.client_id for w in workers if w.counters.connection_lost]
        if lost:
            report.notes.append(f"connections lost: {lost}")

        stats_ok = True
        for name, peer in peers.items():
            try:
                stats = peer.request(StatsRequest(), StatsReport, f"{name} statistics",
                                     control_timeout + DRAIN_TIMEOUT + 5.0).stats
            except (ConfigRejected, ControlTimeout, ConnectionLost) as exc:
                report.notes.append(f"partial stats: {name}: {exc}")
                stats_ok = False
                continue
            samples = stats.pop("samples", [])
            if stats.get("duplicate_rules"):
                report.notes.append(f"{stats['duplicate_rules']} duplicate rules: clients share an address")
            report.samples[name] = [SystemSample.from_dict(s) for s in samples]
            setattr(report, name, stats)

        for name, peer in list(peers.items()):
            done = peer.request(Teardown(), TeardownDone, f"{name} teardown")
            if name == "gateway":
                report.gateway["rules_after_teardown"] = done.rules_remaining
        phase("Complete")
        report.complete = stats_ok and not lost
        return report
    except BaseException:
        stop.set()
        raise
    finally:
        if sampler is not None:
            sampler.stop()
        for w in workers:
            if w.ident is None and w.conn is not None:
                w.conn.close()
        if trace[-1][0] != "Complete":
            _teardown_all(peers)
        for p in peers.values():
            p.close()


def _data_host(host: str, family) -> str:
    import ipaddress
    from .dataplane import loopback
    from .testcase import Family
    try:
        ip = ipaddress.ip_address(host)
    except ValueError:
        return host  # a name; let the resolver pick the family
    if (ip.version == 6) == (family is Family.IPV6):
        return host
    return loopback(family)


def _teardown_all(peers):
    for name, peer in peers.items():
        try:
            peer.request(Teardown(), TeardownDone, f"{name} teardown")
        except Exception as exc:
            log.warning("teardown of %s failed: %s", name, exc)
