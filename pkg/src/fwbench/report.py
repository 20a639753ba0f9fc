"""Results files and the standard analysis tables.

A results file holds one JSON-encoded :class:`~fwbench.metrics.RunReport`
per line and is only ever appended to.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DegeneratePoints, EmptyGroup, MalformedRecord
from .metrics import (REFERENCE_LOSS_PER_RULE, AggregateStats, RunReport,
                      aggregate_runs, attach_decreases, per_rule_loss,
                      threading_difference, turning_point, write_aggregates_csv)
from .testcase import Family

log = logging.getLogger(__name__)


def append_report(path, report: RunReport) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(report.to_dict(), separators=(",", ":")) + "\n")


def read_reports(path, errors: list | None = None) -> list[RunReport]:
    """Parse every line; malformed ones are logged, collected in ``errors``
    (as :class:`MalformedRecord`) and skipped."""
    reports = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                reports.append(RunReport.from_dict(json.loads(line)))
            except Exception as exc:
                err = MalformedRecord(lineno, str(exc))
                log.warning("%s", err)
                if errors is not None:
                    errors.append(err)
    return reports


def _csv(stats) -> str:
    buf = io.StringIO()
    write_aggregates_csv(stats, buf)
    return buf.getvalue()


@dataclass
class Analysis:
    tables: dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def _completed(reports):
    return [r for r in reports if not r.skipped]


def analyze(reports: list[RunReport]) -> Analysis:
    """Build the standard tables:

    ``by_clients``  mean throughput per (family, protocol, n)
    ``by_frame``    mean throughput per (family, protocol, frame size)
    ``decrease``    loss against plain forwarding per (family, protocol, rule_mode, n)
    ``threading``   thread-per-connection vs multiplexed, F=0 stream runs, per n
    ``rule_loss``   loss-per-rule slope per (family, protocol)
    """
    reports = _completed(reports)
    out = Analysis()
    if not reports:
        raise EmptyGroup("no completed runs")
    out.tables["by_clients"] = _csv(aggregate_runs(reports, ("family", "protocol", "n")))
    out.tables["by_frame"] = _csv(aggregate_runs(reports, ("family", "protocol", "frame")))

    dec = attach_decreases(aggregate_runs(reports, ("family", "protocol", "rule_mode", "n")))
    out.tables["decrease"] = _csv(dec)
    with_rules = [s.decrease_pct for s in dec if s.get("rule_mode") and s.decrease_pct is not None]
    if with_rules:
        out.summary["mean_decrease_pct"] = sum(with_rules) / len(with_rules)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["family", "protocol", "slope_pct_per_rule", "intercept", "r_squared", "points",
                "reference_pct_per_rule"])
    slopes = {}
    for family in sorted({s.get("family") for s in dec}):
        for protocol in sorted({s.get("protocol") for s in dec if s.get("family") == family}):
            pts = [(s.get("rule_mode") * s.get("n"), s.decrease_pct) for s in dec
                   if s.get("family") == family and s.get("protocol") == protocol
                   and s.decrease_pct is not None]
            try:
                fit = per_rule_loss(pts)
            except DegeneratePoints:
                continue
            slopes[f"{family}/{protocol}"] = fit.slope
            w.writerow([family, protocol, f"{fit.slope:.6f}", f"{fit.intercept:.6f}",
                        f"{fit.r_squared:.6f}", fit.points,
                        f"{REFERENCE_LOSS_PER_RULE[Family(family)]:.2f}"])
    out.tables["rule_loss"] = buf.getvalue()
    out.summary["loss_per_rule"] = slopes

    streams = [r for r in reports if r.case.rule_mode == 0 and r.case.protocol.is_stream]
    if streams:
        by = aggregate_runs(streams, ("handling", "n"))
        thr = [(s.get("n"), s.mean_bps) for s in by if s.get("handling") == "thread"]
        mux = [(s.get("n"), s.mean_bps) for s in by if s.get("handling") == "epoll"]
        common = sorted({n for n, _ in thr} & {n for n, _ in mux})
        thr = [p for p in thr if p[0] in common]
        mux = [p for p in mux if p[0] in common]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "threaded_bps", "multiplexed_bps", "difference_pct"])
        for (n, a), (_, b), (_, d) in zip(thr, mux, threading_difference(thr, mux)):
            w.writerow([n, f"{a:.6f}", f"{b:.6f}", f"{d:.6f}"])
        out.tables["threading"] = buf.getvalue()
        out.summary["turning_point"] = turning_point(thr, mux) if common else None
    return out


def write_analysis(analysis: Analysis, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in analysis.tables.items():
        p = out_dir / f"{name}.csv"
        p.write_text(text)
        written.append(p)
    p = out_dir / "summary.json"
    p.write_text(json.dumps(analysis.summary, indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written


def grouped_csv(reports: list[RunReport], group_by) -> str:
    stats: list[AggregateStats] = aggregate_runs(_completed(reports), group_by)
    if "rule_mode" in group_by:
        stats = attach_decreases(stats)
    return _csv(stats)
