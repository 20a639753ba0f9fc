"""Filtering middlebox configuration.

Three rule series are supported, selected by the test case's rule mode:

* ``F=0``: plain forwarding, no rules, ACCEPT policy;
* ``F=2``: one upload and one download ACCEPT rule per client thread in the
  filter table's FORWARD chain, DROP policy;
* ``F=4``: as ``F=2`` plus one upload and one download MARK rule per client
  in the mangle table's PREROUTING chain.

Rule sets can be rendered as ``iptables``/``ip6tables`` commands and applied
to the kernel, or installed in the in-process first-match matcher used by
:class:`UserspaceForwarder`.
"""
from __future__ import annotations

import dataclasses
import ipaddress
import json
import logging
import os
import selectors
import shlex
import shutil
import socket
import subprocess
import threading
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from . import control
from .dataplane import (DRAIN_TIMEOUT, POLL_INTERVAL, StopSignal, family_af,
                        loopback, make_socket)
from .errors import (AddressFamilyMismatch, BindFailed, CommandFailed,
                     PrivilegeError, ProtocolUnavailable, RestoreIncomplete,
                     UpstreamUnreachable, ValidationError)
from .metrics import SystemSampler
from .testcase import Family, Protocol, TestCase, validate

log = logging.getLogger(__name__)

ACCEPT = "ACCEPT"
DROP = "DROP"
MARK = "MARK"

#: forwarder drain outlasts the clients' so in-flight echoes still pass
FORWARDER_DRAIN = DRAIN_TIMEOUT + 1.0


def _norm_addr(addr, family: Family | None = None) -> str:
    ip = ipaddress.ip_address(str(addr).split("%", 1)[0])
    if family is not None and (ip.version == 6) != (family is Family.IPV6):
        raise AddressFamilyMismatch(f"{addr} is not an {family.value} address")
    return ip.compressed


@dataclass(frozen=True)
class RuleSpec:
    table: str
    chain: str
    direction: str
    src: str
    dst: str
    protocol: str
    action: str
    mark: int | None = None
    owner_client: int = 0

    def __post_init__(self):
        if self.action == ACCEPT and (self.table, self.chain) != ("filter", "FORWARD"):
            raise ValidationError("ACCEPT rules belong in filter/FORWARD")
        if self.action == MARK:
            if (self.table, self.chain) != ("mangle", "PREROUTING"):
                raise ValidationError("MARK rules belong in mangle/PREROUTING")
            if not self.mark or self.mark <= 0 or self.mark >= 1 << 32:
                raise ValidationError(f"mark value must be in [1, 2**32), got {self.mark}")

    @property
    def match_key(self) -> tuple[str, str, str]:
        return (self.src, self.dst, self.protocol)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[RuleSpec, ...] = ()
    default_policy: str = ACCEPT

    def __len__(self):
        return len(self.rules)

    @cached_property
    def filter_rules(self) -> tuple[RuleSpec, ...]:
        return tuple(r for r in self.rules if r.table == "filter")

    @cached_property
    def mangle_rules(self) -> tuple[RuleSpec, ...]:
        return tuple(r for r in self.rules if r.table == "mangle")

    @cached_property
    def duplicate_count(self) -> int:
        """Rules that repeat an earlier rule of the same chain verbatim.
        They happen whenever clients share one address."""
        seen, dup = set(), 0
        for r in self.rules:
            key = (r.table, r.chain, r.match_key, r.action, r.mark)
            dup += key in seen
            seen.add(key)
        return dup

    @cached_property
    def _filter_keys(self):
        return [(r.match_key, r.action) for r in self.filter_rules]

    @cached_property
    def _mangle_keys(self):
        return [(r.match_key, r.mark) for r in self.mangle_rules]


EMPTY_RULESET = RuleSet()


def generate_rules(case: TestCase, client_addrs, server_addr) -> RuleSet:
    """Build the rule series for ``case``.

    ``client_addrs`` holds one address per client thread; entries may repeat
    (several threads on one host), and the rules are duplicated accordingly.
    Mark values are the 1-based client index.
    """
    case = validate(case)
    if isinstance(client_addrs, (str, bytes)):
        client_addrs = [client_addrs] * case.n
    client_addrs = list(client_addrs)
    if len(client_addrs) != case.n:
        raise ValidationError(f"need {case.n} client addresses, got {len(client_addrs)}")
    if case.rule_mode == 0:
        return RuleSet((), ACCEPT)

    server = _norm_addr(server_addr, case.family)
    clients = [_norm_addr(a, case.family) for a in client_addrs]
    proto = case.protocol.value
    accepts, marks = [], []
    for i, client in enumerate(clients, start=1):
        accepts.append(RuleSpec("filter", "FORWARD", "upload", client, server, proto, ACCEPT, owner_client=i))
        accepts.append(RuleSpec("filter", "FORWARD", "download", server, client, proto, ACCEPT, owner_client=i))
        if case.rule_mode == 4:
            marks.append(RuleSpec("mangle", "PREROUTING", "upload", client, server, proto, MARK, i, i))
            marks.append(RuleSpec("mangle", "PREROUTING", "download", server, client, proto, MARK, i, i))
    return RuleSet(tuple(accepts + marks), DROP)


def _tool(family: Family) -> str:
    return "ip6tables" if Family(family) is Family.IPV6 else "iptables"


def render_rule(rule: RuleSpec, family: Family) -> str:
    tool = _tool(family)
    if rule.action == MARK:
        return (f"{tool} -t mangle -A PREROUTING -s {rule.src} -d {rule.dst} "
                f"-p {rule.protocol} -j MARK --set-mark {rule.mark}")
    return f"{tool} -A FORWARD -s {rule.src} -d {rule.dst} -p {rule.protocol} -j {rule.action}"


def render_netfilter_commands(rules: RuleSet, family: Family) -> list[str]:
    """One command per rule in order, then the FORWARD policy command."""
    cmds = [render_rule(r, family) for r in rules.rules]
    cmds.append(f"{_tool(family)} -P FORWARD {rules.default_policy}")
    return cmds


@dataclass(frozen=True)
class PacketMeta:
    src: str
    dst: str
    protocol: str
    family: Family
    length: int = 0

    @classmethod
    def of(cls, src, dst, protocol, length: int = 0) -> "PacketMeta":
        s, d = ipaddress.ip_address(str(src).split("%", 1)[0]), ipaddress.ip_address(str(dst).split("%", 1)[0])
        if s.version != d.version:
            raise AddressFamilyMismatch(f"{src} and {dst} belong to different families")
        fam = Family.IPV6 if s.version == 6 else Family.IPV4
        return cls(s.compressed, d.compressed, str(getattr(protocol, "value", protocol)), fam, length)


@dataclass(frozen=True)
class Verdict:
    action: str
    mark: int | None
    comparisons: int


def evaluate(meta: PacketMeta, rules: RuleSet) -> Verdict:
    """First-match linear scan: mangle/PREROUTING for a mark, then
    filter/FORWARD for the verdict, falling back to the chain policy.

    ``comparisons`` counts every rule predicate tested in both chains.
    """
    key = (meta.src, meta.dst, meta.protocol)
    comparisons = 0
    mark = None
    for rule_key, value in rules._mangle_keys:
        comparisons += 1
        if rule_key == key:
            mark = value
            break
    for rule_key, action in rules._filter_keys:
        comparisons += 1
        if rule_key == key:
            return Verdict(action, mark, comparisons)
    return Verdict(rules.default_policy, mark, comparisons)


# backends -----------------------------------------------------------------

@dataclass
class ApplyReceipt:
    backend: str
    family: str
    commands: list[str] = field(default_factory=list)
    inverse: list[str] = field(default_factory=list)
    snapshot: dict = field(default_factory=dict)
    rule_count: int = 0

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "ApplyReceipt":
        return cls(**json.loads(Path(path).read_text()))


class UserspaceBackend:
    name = "userspace"

    def __init__(self):
        self.rules: RuleSet = EMPTY_RULESET

    def apply(self, rules: RuleSet, family: Family = Family.IPV4) -> ApplyReceipt:
        self.rules = rules
        return ApplyReceipt(self.name, Family(family).value, rule_count=len(rules))

    def restore(self, receipt: ApplyReceipt | None = None) -> None:
        self.rules = EMPTY_RULESET

    def rule_count(self) -> int:
        return len(self.rules)

    @property
    def policy(self) -> str:
        return self.rules.default_policy


def _run_command(argv: list[str]) -> tuple[int, str]:
    proc = subprocess.run(argv, capture_output=True, text=True)
    return proc.returncode, proc.stdout + proc.stderr


class NetfilterBackend:
    """Applies rendered commands to the kernel and records their inverses.

    ``runner`` executes one argv list and returns ``(returncode, output)``;
    tests substitute a fake.
    """

    name = "netfilter"

    def __init__(self, runner=None, check_privileges: bool = True):
        self.runner = runner or _run_command
        self.check_privileges = check_privileges
        self.receipt: ApplyReceipt | None = None

    def ensure_privileges(self, family: Family = Family.IPV4) -> None:
        if not self.check_privileges:
            return
        tool = _tool(family)
        if hasattr(os, "geteuid") and os.geteuid() != 0:
            raise PrivilegeError(f"{tool} needs administrative privileges")
        if shutil.which(tool) is None:
            raise PrivilegeError(f"{tool} not found on PATH")

    def _exec(self, cmd: str) -> tuple[int, str]:
        return self.runner(shlex.split(cmd))

    def listing(self, family: Family) -> dict:
        tool = _tool(family)
        out = {}
        for table, chain in (("filter", "FORWARD"), ("mangle", "PREROUTING")):
            rc, text = self._exec(f"{tool} -t {table} -S {chain}")
            if rc != 0:
                raise CommandFailed(-1, f"{tool} -t {table} -S {chain}", text.strip())
            out[f"{table}/{chain}"] = [ln for ln in text.splitlines() if ln.strip()]
        return out

    @staticmethod
    def _policy(listing: dict) -> str:
        for line in listing.get("filter/FORWARD", []):
            parts = line.split()
            if parts[:2] == ["-P", "FORWARD"] and len(parts) >= 3:
                return parts[2]
        return ACCEPT

    @staticmethod
    def _inverse(cmd: str, original_policy: str) -> str:
        if " -P FORWARD " in cmd:
            return cmd.rsplit(" ", 1)[0] + " " + original_policy
        return cmd.replace(" -A ", " -D ", 1)

    def apply(self, rules: RuleSet, family: Family = Family.IPV4) -> ApplyReceipt:
        family = Family(family)
        self.ensure_privileges(family)
        snapshot = self.listing(family)
        original = self._policy(snapshot)
        commands = render_netfilter_commands(rules, family)
        done: list[str] = []
        for i, cmd in enumerate(commands):
            rc, out = self._exec(cmd)
            if rc != 0:
                for undo in reversed(done):
                    self._exec(undo)
                raise CommandFailed(i, cmd, out.strip())
            done.append(self._inverse(cmd, original))
        self.receipt = ApplyReceipt(self.name, family.value, commands, list(reversed(done)),
                                    snapshot, len(rules))
        return self.receipt

    def restore(self, receipt: ApplyReceipt | None = None) -> None:
        receipt = receipt or self.receipt
        if receipt is None:
            return
        family = Family(receipt.family)
        failed = [cmd for cmd in receipt.inverse if self._exec(cmd)[0] != 0]
        after = self.listing(family)
        if failed or (receipt.snapshot and after != receipt.snapshot):
            raise RestoreIncomplete(f"{len(failed)} inverse commands failed; "
                                    f"listing matches snapshot: {after == receipt.snapshot}")
        self.receipt = None

    def rule_count(self) -> int:
        if self.receipt is None:
            return 0
        after = self.listing(Family(self.receipt.family))
        before = self.receipt.snapshot
        return sum(max(0, len(after[k]) - len(before.get(k, []))) for k in after)


def make_backend(name: str, **kw):
    if name == "userspace":
        return UserspaceBackend()
    if name == "netfilter":
        return NetfilterBackend(**kw)
    raise ValueError(f"unknown backend {name!r}")


def apply_rules(backend, rules: RuleSet, family: Family = Family.IPV4) -> ApplyReceipt:
    return backend.apply(rules, family)


def restore(backend, receipt: ApplyReceipt | None = None) -> None:
    backend.restore(receipt)


# userspace forwarder ------------------------------------------------------

@dataclass
class DirectionStats:
    units: int = 0
    bytes: int = 0
    forwarded: int = 0
    dropped: int = 0
    comparisons: int = 0
    marks: Counter = field(default_factory=Counter)

    def add(self, other: "DirectionStats"):
        self.units += other.units
        self.bytes += other.bytes
        self.forwarded += other.forwarded
        self.dropped += other.dropped
        self.comparisons += other.comparisons
        self.marks.update(other.marks)

    def record(self, verdict: Verdict, nbytes: int):
        self.units += 1
        self.bytes += nbytes
        self.comparisons += verdict.comparisons
        if verdict.mark is not None:
            self.marks[verdict.mark] += 1
        if verdict.action == ACCEPT:
            self.forwarded += 1
        else:
            self.dropped += 1


@dataclass
class ForwarderStats:
    upload: DirectionStats = field(default_factory=DirectionStats)
    download: DirectionStats = field(default_factory=DirectionStats)
    connections: int = 0
    injected_drops: int = 0
    rule_count: int = 0

    @property
    def total_comparisons(self) -> int:
        return self.upload.comparisons + self.download.comparisons

    def to_dict(self) -> dict:
        def d(s: DirectionStats):
            out = dataclasses.asdict(s)
            out["marks"] = {str(k): v for k, v in s.marks.items()}
            return out
        return {"upload": d(self.upload), "download": d(self.download),
                "connections": self.connections, "injected_drops": self.injected_drops,
                "rule_count": self.rule_count, "total_comparisons": self.total_comparisons}

    @classmethod
    def from_dict(cls, d: dict) -> "ForwarderStats":
        def s(x):
            x = dict(x)
            x["marks"] = Counter({int(k): v for k, v in x.get("marks", {}).items()})
            return DirectionStats(**x)
        return cls(s(d["upload"]), s(d["download"]), d.get("connections", 0),
                   d.get("injected_drops", 0), d.get("rule_count", 0))


class UserspaceForwarder:
    """Relay between clients and the server that runs every forwarded unit
    (one ``recv`` buffer on streams, one datagram on UDP) through
    :func:`evaluate`. Dropped units are discarded silently.

    ``drop_every=k`` additionally discards every k-th client-to-server
    datagram, to inject a known amount of loss.
    """

    def __init__(self, case: TestCase, rules_source, listen_host: str | None = None,
                 listen_port: int = 0, drop_every: int | None = None,
                 drain: float = FORWARDER_DRAIN):
        self.case = case
        self.rules_source = rules_source
        self.drop_every = drop_every
        self.stop_signal = StopSignal(drain)
        self.upstream: tuple[str, int] | None = None
        self.stats = ForwarderStats()
        self._parts: list[ForwarderStats] = []
        self._parts_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        host = listen_host or loopback(case.family)
        try:
            self.listener = make_socket(case.protocol, case.family)
        except ProtocolUnavailable:
            raise
        try:
            self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self.listener.bind((host, listen_port))
            if case.protocol.is_stream:
                self.listener.listen(max(case.n, 16))
        except OSError as exc:
            self.listener.close()
            raise BindFailed(f"forwarder cannot bind {host}:{listen_port}: {exc}") from exc
        self.port = self.listener.getsockname()[1]
        self._main: threading.Thread | None = None

    @property
    def rules(self) -> RuleSet:
        src = self.rules_source
        return src if isinstance(src, RuleSet) else src.rules

    def start(self, upstream) -> "UserspaceForwarder":
        self.upstream = (str(upstream[0]), int(upstream[1]))
        target = self._serve_datagram if self.case.protocol is Protocol.UDP else self._serve_stream
        self._main = threading.Thread(target=target, name="forwarder", daemon=True)
        self._main.start()
        return self

    def stop(self):
        self.stop_signal.set()

    def join(self, timeout=None) -> ForwarderStats:
        if self._main is not None:
            self._main.join(timeout)
        for t in list(self._threads):
            t.join(timeout)
        total = ForwarderStats(rule_count=len(self.rules))
        with self._parts_lock:
            for part in self._parts:
                total.upload.add(part.upload)
                total.download.add(part.download)
                total.connections += part.connections
                total.injected_drops += part.injected_drops
        self.stats = total
        return total

    def _merge(self, part: ForwarderStats):
        with self._parts_lock:
            self._parts.append(part)

    # streams

    def _serve_stream(self):
        self.listener.settimeout(POLL_INTERVAL)
        accepted = ForwarderStats()
        try:
            while not self.stop_signal.is_set():
                try:
                    client, addr = self.listener.accept()
                except socket.timeout:
                    continue
                except OSError:
                    break
                try:
                    upstream = make_socket(self.case.protocol, self.case.family)
                    upstream.settimeout(5.0)
                    upstream.connect(self.upstream)
                except OSError as exc:
                    log.warning("%s", UpstreamUnreachable(f"{self.upstream}: {exc}"))
                    client.close()
                    continue
                if self.case.protocol is Protocol.TCP:
                    client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                accepted.connections += 1
                client_host = addr[0]
                up_meta = (client_host, self.upstream[0])
                down_meta = (self.upstream[0], client_host)
                for src, dst, direction in ((client, upstream, "upload"), (upstream, client, "download")):
                    meta = up_meta if direction == "upload" else down_meta
                    t = threading.Thread(target=self._relay, args=(src, dst, meta, direction),
                                         daemon=True, name=f"relay-{direction}")
                    t.start()
                    self._threads.append(t)
        finally:
            self.listener.close()
            self._merge(accepted)

    def _relay(self, src: socket.socket, dst: socket.socket, addrs, direction: str):
        part = ForwarderStats()
        mine = part.upload if direction == "upload" else part.download
        proto = self.case.protocol.value
        base = PacketMeta.of(addrs[0], addrs[1], proto)
        src.settimeout(POLL_INTERVAL)
        try:
            while not self.stop_signal.expired():
                try:
                    data = src.recv(65536)
                except socket.timeout:
                    continue
                except OSError:
                    break
                if not data:
                    break
                verdict = evaluate(dataclasses.replace(base, length=len(data)), self.rules)
                mine.record(verdict, len(data))
                if verdict.action != ACCEPT:
                    continue
                try:
                    dst.sendall(data)
                except OSError:
                    break
        finally:
            try:
                dst.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            if direction == "download":
                # the download relay is the last user of both sockets
                for s in (src, dst):
                    try:
                        s.close()
                    except OSError:
                        pass
            self._merge(part)

    # datagrams

    def _serve_datagram(self):
        part = ForwarderStats()
        sel = selectors.DefaultSelector()
        self.listener.setblocking(False)
        sel.register(self.listener, selectors.EVENT_READ, None)
        upstreams: dict[tuple, socket.socket] = {}
        proto = self.case.protocol.value
        seen_up = 0
        try:
            while not self.stop_signal.expired():
                for key, _ in sel.select(POLL_INTERVAL):
                    if key.data is None:
                        try:
                            data, caddr = self.listener.recvfrom(65535)
                        except (BlockingIOError, OSError):
                            continue
                        seen_up += 1
                        if self.drop_every and seen_up % self.drop_every == 0:
                            part.injected_drops += 1
                            continue
                        verdict = evaluate(PacketMeta.of(caddr[0], self.upstream[0], proto, len(data)),
                                           self.rules)
                        part.upload.record(verdict, len(data))
                        if verdict.action != ACCEPT:
                            continue
                        up = upstreams.get(caddr)
                        if up is None:
                            up = socket.socket(family_af(self.case.family), socket.SOCK_DGRAM)
                            up.connect(self.upstream)
                            up.setblocking(False)
                            upstreams[caddr] = up
                            part.connections += 1
                            sel.register(up, selectors.EVENT_READ, caddr)
                        try:
                            up.send(data)
                        except OSError:
                            pass
                    else:
                        caddr = key.data
                        try:
                            data = key.fileobj.recv(65535)
                        except (BlockingIOError, OSError):
                            continue
                        verdict = evaluate(PacketMeta.of(self.upstream[0], caddr[0], proto, len(data)),
                                           self.rules)
                        part.download.record(verdict, len(data))
                        if verdict.action != ACCEPT:
                            continue
                        try:
                            self.listener.sendto(data, caddr)
                        except OSError:
                            pass
        finally:
            for up in upstreams.values():
                up.close()
            sel.close()
            self.listener.close()
            self._merge(part)


class GatewayAgent(control.Agent):
    """Control-session handler for the gateway role."""

    role = "gateway"

    def __init__(self, backend="userspace", listen_host: str | None = None,
                 receipt_path=None, sample_interval: float = 1.0, drop_every: int | None = None):
        super().__init__()
        self.backend = make_backend(backend) if isinstance(backend, str) else backend
        self.listen_host = listen_host
        self.receipt_path = Path(receipt_path) if receipt_path else None
        self.sample_interval = sample_interval
        self.drop_every = drop_every
        self.receipt: ApplyReceipt | None = None
        self.forwarder: UserspaceForwarder | None = None
        self.sampler: SystemSampler | None = None
        self.case: TestCase | None = None
        self.rules: RuleSet = EMPTY_RULESET

    def on_configure_gateway(self, msg: control.ConfigureGateway):
        if self.case is not None:
            return control.ErrorReply("busy", "gateway already configured")
        try:
            case = validate(msg.case)
            rules = generate_rules(case, msg.client_addrs or msg.client_addr, msg.server_addr)
            self.receipt = self.backend.apply(rules, case.family)
        except PrivilegeError as exc:
            return control.ErrorReply("privilege", str(exc))
        except CommandFailed as exc:
            return control.ErrorReply("command_failed", str(exc))
        except (ValidationError, AddressFamilyMismatch, ValueError) as exc:
            return control.ErrorReply("invalid", str(exc))
        self.case = case
        self.rules = rules
        if self.receipt_path is not None and self.backend.name == "netfilter":
            self.receipt.save(self.receipt_path)
        port = None
        if self.backend.name == "userspace":
            host = self.listen_host if self.listen_host and \
                self._host_matches(self.listen_host, case.family) else None
            try:
                self.forwarder = UserspaceForwarder(case, self.backend, host, drop_every=self.drop_every)
            except (ProtocolUnavailable, BindFailed) as exc:
                self.teardown()
                return control.ErrorReply("protocol_unavailable" if isinstance(exc, ProtocolUnavailable)
                                          else "bind_failed", str(exc))
            port = self.forwarder.port
        self.sampler = SystemSampler(self.sample_interval).start()
        self.phase = "GatewayConfigured"
        return control.GatewayReady(port)

    @staticmethod
    def _host_matches(host, family):
        try:
            return (ipaddress.ip_address(host).version == 6) == (family is Family.IPV6)
        except ValueError:
            return True

    def on_start(self, msg: control.Start):
        if self.forwarder is not None and msg.upstream:
            self.forwarder.start(msg.upstream)
        self.phase = "Running"
        return None

    def on_stop_cycle(self, msg):
        if self.forwarder is not None:
            self.forwarder.stop()
        self.phase = "Draining"
        return None

    def on_stats_request(self, msg):
        if self.case is None:
            return control.ErrorReply("not_configured", "no experiment configured")
        samples = self.sampler.stop() if self.sampler else []
        self.sampler = None
        if self.forwarder is not None:
            self.forwarder.stop()
            body = self.forwarder.join(FORWARDER_DRAIN + 5.0).to_dict()
        else:
            body = {"rule_count": self.receipt.rule_count if self.receipt else 0,
                    "commands": list(self.receipt.commands) if self.receipt else []}
        body["backend"] = self.backend.name
        body["duplicate_rules"] = self.rules.duplicate_count
        body["samples"] = [s.to_dict() for s in samples]
        return control.StatsReport(body)

    def teardown(self):
        if self.forwarder is not None:
            self.forwarder.stop()
            if self.forwarder._main is None:
                self.forwarder.listener.close()
            self.forwarder.join(FORWARDER_DRAIN + 5.0)
            self.forwarder = None
        if self.sampler is not None:
            self.sampler.stop()
            self.sampler = None
        if self.receipt is not None:
            self.backend.restore(self.receipt)
            self.receipt = None
            if self.receipt_path is not None and self.receipt_path.exists():
                self.receipt_path.unlink()
        self.case = None
        self.rules = EMPTY_RULESET

    def rules_remaining(self) -> int:
        return self.backend.rule_count()
