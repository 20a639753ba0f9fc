"""Measurement-point counters, host sampling and the throughput statistics
computed over finished runs.

Throughput is client-side validated goodput: bytes that came back to the
sender at the fourth measurement point and passed validation, times eight,
divided by the run duration.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import (BaselineMissing, CountersUnavailable, DegeneratePoints,
                     EmptyGroup, GridMismatch, ZeroBaseline)
from .testcase import Family, TestCase

log = logging.getLogger(__name__)

LINK_CAPACITY_BPS = 1e9
#: observed loss per simple filter rule, percent of baseline throughput
REFERENCE_LOSS_PER_RULE = {Family.IPV4: 0.05, Family.IPV6: 0.03}

GROUP_FIELDS = ("family", "protocol", "handling", "rule_mode", "frame", "n", "t")


@dataclass
class CycleCounters:
    client_id: int = 0
    mp1_sent_ok: int = 0
    mp1_unsent: int = 0
    mp1_bytes: int = 0
    mp2_received: int = 0
    mp2_valid: int = 0
    mp2_invalid: int = 0
    mp2_bytes: int = 0
    mp3_sent_ok: int = 0
    mp3_unsent: int = 0
    mp3_bytes: int = 0
    mp4_received: int = 0
    mp4_valid: int = 0
    mp4_invalid: int = 0
    mp4_bytes: int = 0
    mp4_valid_bytes: int = 0
    gap_events: int = 0
    gap_total_missing: int = 0
    cycles: int = 0
    latency_total: float = 0.0
    connection_lost: bool = False

    def merge(self, other: "CycleCounters") -> "CycleCounters":
        out = dataclasses.replace(self)
        for f in dataclasses.fields(self):
            if f.name == "client_id":
                continue
            if f.name == "connection_lost":
                out.connection_lost = self.connection_lost or other.connection_lost
            else:
                setattr(out, f.name, getattr(self, f.name) + getattr(other, f.name))
        return out

    @property
    def mean_latency(self) -> float:
        return self.latency_total / self.mp4_received if self.mp4_received else 0.0

    def consistent(self) -> bool:
        values = [getattr(self, f.name) for f in dataclasses.fields(self)
                  if f.name not in ("connection_lost",)]
        return (all(v >= 0 for v in values)
                and self.mp2_valid + self.mp2_invalid == self.mp2_received
                and self.mp4_valid + self.mp4_invalid == self.mp4_received)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CycleCounters":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class SystemSample:
    timestamp: float
    cpu_utilization: float | None
    memory_used: int | None
    context_switches: int | None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSample":
        return cls(d["timestamp"], d.get("cpu_utilization"), d.get("memory_used"),
                   d.get("context_switches"))


def _read_host_counters():
    import psutil
    times = psutil.cpu_times()
    busy = sum(times) - times.idle - getattr(times, "iowait", 0.0)
    return sum(times), busy, psutil.virtual_memory().used, psutil.cpu_stats().ctx_switches


class SystemSampler:
    """Background sampler of host CPU, memory and context-switch counters.

    One sample is taken at :meth:`start` and then one per ``interval`` until
    :meth:`stop`, which returns the whole series.
    """

    def __init__(self, interval: float = 1.0, reader=_read_host_counters):
        self.interval = interval
        self.samples: list[SystemSample] = []
        self.available = True
        self._reader = reader
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._prev = None
        self._t0 = time.time() - time.monotonic()

    def _take(self):
        ts = self._t0 + time.monotonic()
        if self.samples and ts <= self.samples[-1].timestamp:
            ts = math.nextafter(self.samples[-1].timestamp, math.inf)
        try:
            total, busy, mem, ctx = self._reader()
        except Exception as exc:  # psutil missing, /proc unreadable, ...
            if self.available:
                log.warning("host counters unavailable: %s", exc)
            self.available = False
            self.samples.append(SystemSample(ts, None, None, None))
            return
        cpu = None
        if self._prev is not None:
            d_total = total - self._prev[0]
            cpu = (busy - self._prev[1]) / d_total if d_total > 0 else 0.0
            cpu = min(max(cpu, 0.0), 1.0)
        self._prev = (total, busy)
        self.samples.append(SystemSample(ts, cpu, int(mem), int(ctx)))

    def _run(self):
        self._take()
        while not self._stop.wait(self.interval):
            self._take()

    def start(self) -> "SystemSampler":
        self._thread = threading.Thread(target=self._run, name="sampler", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> list[SystemSample]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        return list(self.samples)


def sample_system(interval: float = 1.0, stop: threading.Event | None = None,
                  reader=_read_host_counters):
    """Yield one :class:`SystemSample` per ``interval`` until ``stop`` is set.

    Raises :class:`CountersUnavailable` on the first sample if the host
    offers no counters at all; callers that prefer to keep running should
    use :class:`SystemSampler`, which marks samples absent instead.
    """
    stop = stop or threading.Event()
    sampler = SystemSampler(interval, reader)
    sampler._take()
    if not sampler.available:
        raise CountersUnavailable("host exposes no CPU/memory/context-switch counters")
    yield sampler.samples[-1]
    while not stop.wait(interval):
        sampler._take()
        yield sampler.samples[-1]


def context_switch_rate(samples: Sequence[SystemSample]) -> float | None:
    usable = [s for s in samples if s.context_switches is not None]
    if len(usable) < 2:
        return None
    span = usable[-1].timestamp - usable[0].timestamp
    if span <= 0:
        return None
    return (usable[-1].context_switches - usable[0].context_switches) / span


@dataclass
class RunReport:
    case: TestCase
    repetition: int = 0
    clients: list[CycleCounters] = field(default_factory=list)
    server: dict = field(default_factory=dict)
    gateway: dict = field(default_factory=dict)
    samples: dict[str, list[SystemSample]] = field(default_factory=dict)
    duration: float = 0.0
    phase_trace: list[tuple[str, float]] = field(default_factory=list)
    complete: bool = True
    skipped: str | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def phases(self) -> list[str]:
        return [p for p, _ in self.phase_trace]

    def totals(self) -> CycleCounters:
        total = CycleCounters()
        for c in self.clients:
            total = total.merge(c)
        return total

    def to_dict(self) -> dict:
        return {
            "case": self.case.to_dict(),
            "repetition": self.repetition,
            "clients": [c.to_dict() for c in self.clients],
            "server": self.server,
            "gateway": self.gateway,
            "samples": {k: [s.to_dict() for s in v] for k, v in self.samples.items()},
            "duration": self.duration,
            "phase_trace": [[p, ts] for p, ts in self.phase_trace],
            "complete": self.complete,
            "skipped": self.skipped,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            case=TestCase.from_dict(d["case"]),
            repetition=int(d.get("repetition", 0)),
            clients=[CycleCounters.from_dict(c) for c in d.get("clients", [])],
            server=d.get("server", {}),
            gateway=d.get("gateway", {}),
            samples={k: [SystemSample.from_dict(s) for s in v]
                     for k, v in d.get("samples", {}).items()},
            duration=float(d.get("duration", 0.0)),
            phase_trace=[(p, ts) for p, ts in d.get("phase_trace", [])],
            complete=bool(d.get("complete", True)),
            skipped=d.get("skipped"),
            notes=list(d.get("notes", [])),
        )


def throughput_per_client(counters: CycleCounters, t: float) -> float:
    """Validated goodput in bits/s measured where the echo returns to the client."""
    if t <= 0:
        raise ValueError("duration must be positive")
    return counters.mp4_valid_bytes * 8 / t


def send_rate_per_client(counters: CycleCounters, t: float) -> float:
    """Offered load in bits/s at the client's send point (diagnostic only)."""
    if t <= 0:
        raise ValueError("duration must be positive")
    return counters.mp1_bytes * 8 / t


def report_throughput(report: RunReport) -> float:
    """Mean per-client throughput of one run."""
    if not report.clients:
        return 0.0
    return math.fsum(throughput_per_client(c, report.case.t) for c in report.clients) / len(report.clients)


def case_field(case: TestCase, name: str):
    if name == "frame":
        return case.frame.label
    value = getattr(case, name)
    return getattr(value, "value", value)


def _sort_token(value):
    if isinstance(value, (int, float)):
        return (0, value, "")
    try:
        return (0, float(value), "")
    except (TypeError, ValueError):
        return (1, 0, str(value))


@dataclass(frozen=True)
class AggregateStats:
    key: tuple[tuple[str, object], ...]
    mean_bps: float
    variance: float
    samples: int
    decrease_pct: float | None = None

    @property
    def normalized(self) -> float:
        return self.mean_bps / LINK_CAPACITY_BPS

    def get(self, name, default=None):
        return dict(self.key).get(name, default)

    def key_without(self, name) -> tuple:
        return tuple((k, v) for k, v in self.key if k != name)


def aggregate_runs(reports: Iterable[RunReport], group_by: Sequence[str]) -> list[AggregateStats]:
    """Mean and population variance of per-run throughput within each group.

    Each run contributes its mean per-client throughput, so repetitions
    are weighted equally regardless of ``n``. Output is sorted by key.
    """
    for name in group_by:
        if name not in GROUP_FIELDS:
            raise ValueError(f"cannot group by {name!r}; choose from {GROUP_FIELDS}")
    groups: dict[tuple, list[float]] = {}
    for report in reports:
        if report.skipped:
            continue
        key = tuple((name, case_field(report.case, name)) for name in group_by)
        groups.setdefault(key, []).append(report_throughput(report))
    if not groups:
        raise EmptyGroup("no completed runs to aggregate")

    out = []
    for key in sorted(groups, key=lambda k: [_sort_token(v) for _, v in k]):
        values = groups[key]
        mean = math.fsum(values) / len(values)
        var = math.fsum((v - mean) ** 2 for v in values) / len(values)
        out.append(AggregateStats(key, mean, var, len(values)))
    return out


def baseline_decrease(with_rules: AggregateStats, baseline: AggregateStats | None) -> float:
    """Percent throughput lost relative to the plain-forwarding group."""
    if baseline is None or baseline.get("rule_mode") != 0:
        raise BaselineMissing("baseline group must have rule_mode 0")
    if with_rules.key_without("rule_mode") != baseline.key_without("rule_mode"):
        raise BaselineMissing(f"groups differ beyond rule_mode: {with_rules.key} vs {baseline.key}")
    if baseline.mean_bps == 0:
        raise ZeroBaseline("baseline throughput is zero")
    return 100.0 * (baseline.mean_bps - with_rules.mean_bps) / baseline.mean_bps


def attach_decreases(stats: Sequence[AggregateStats]) -> list[AggregateStats]:
    """Fill ``decrease_pct`` on every rule-bearing group that has a baseline."""
    baselines = {s.key_without("rule_mode"): s for s in stats if s.get("rule_mode") == 0}
    out = []
    for s in stats:
        base = baselines.get(s.key_without("rule_mode"))
        if s.get("rule_mode") and base is not None and base.mean_bps:
            s = dataclasses.replace(s, decrease_pct=baseline_decrease(s, base))
        elif s.get("rule_mode") == 0:
            s = dataclasses.replace(s, decrease_pct=0.0)
        out.append(s)
    return out


@dataclass(frozen=True)
class LossFit:
    slope: float
    intercept: float
    r_squared: float
    points: int


def per_rule_loss(points: Sequence[tuple[float, float]]) -> LossFit:
    """Least-squares line through ``(rule_count, decrease_pct)`` points."""
    pts = [(float(r), float(d)) for r, d in points]
    xs = {r for r, _ in pts}
    if len(xs) < 2 or 0.0 not in xs:
        raise DegeneratePoints("need at least two distinct rule counts, one of them 0")
    k = len(pts)
    mx = math.fsum(r for r, _ in pts) / k
    my = math.fsum(d for _, d in pts) / k
    sxx = math.fsum((r - mx) ** 2 for r, _ in pts)
    sxy = math.fsum((r - mx) * (d - my) for r, d in pts)
    syy = math.fsum((d - my) ** 2 for _, d in pts)
    slope = sxy / sxx
    intercept = my - slope * mx
    if syy == 0:
        r2 = 1.0
    else:
        sse = math.fsum((d - (intercept + slope * r)) ** 2 for r, d in pts)
        r2 = 1.0 - sse / syy
    return LossFit(slope, intercept, r2, k)


def _check_grid(threaded, multiplexed):
    grid_t = [n for n, _ in threaded]
    grid_m = [n for n, _ in multiplexed]
    if grid_t != grid_m:
        raise GridMismatch(f"client grids differ: {grid_t} vs {grid_m}")
    if grid_t != sorted(set(grid_t)):
        raise GridMismatch("client grid must be strictly ascending")


def turning_point(threaded: Sequence[tuple[int, float]],
                  multiplexed: Sequence[tuple[int, float]]) -> int | None:
    """Smallest ``n`` at which multiplexed handling catches up with
    thread-per-connection, after threads led at some smaller ``n``."""
    _check_grid(threaded, multiplexed)
    threads_led = False
    for (n, thr), (_, mux) in zip(threaded, multiplexed):
        if thr > mux:
            threads_led = True
        elif threads_led:
            return n
    return None


def threading_difference(threaded: Sequence[tuple[int, float]],
                         multiplexed: Sequence[tuple[int, float]]) -> list[tuple[int, float]]:
    """Percent by which threaded throughput exceeds multiplexed, per ``n``."""
    _check_grid(threaded, multiplexed)
    return [(n, 100.0 * (thr - mux) / mux if mux else math.nan)
            for (n, thr), (_, mux) in zip(threaded, multiplexed)]


CSV_TAIL = ("mean_bps", "normalized", "decrease_pct", "variance", "samples")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_aggregates_csv(stats: Sequence[AggregateStats], fh) -> None:
    """Write one row per group: key fields, then :data:`CSV_TAIL` columns."""
    key_fields = [k for k, _ in stats[0].key] if stats else []
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(list(key_fields) + list(CSV_TAIL))
    for s in stats:
        writer.writerow([_fmt(v) for _, v in s.key]
                        + [_fmt(s.mean_bps), _fmt(s.normalized), _fmt(s.decrease_pct),
                           _fmt(s.variance), s.samples])
