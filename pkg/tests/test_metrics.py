import io
import itertools
import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fwbench.errors import (BaselineMissing, CountersUnavailable, DegeneratePoints, EmptyGroup,
                            GridMismatch, ZeroBaseline)
from fwbench.metrics import (AggregateStats, CycleCounters, RunReport, SystemSample,
                             SystemSampler, aggregate_runs, attach_decreases, baseline_decrease,
                             context_switch_rate, per_rule_loss, report_throughput,
                             sample_system, threading_difference, throughput_per_client,
                             turning_point, write_aggregates_csv)
from fwbench.testcase import FrameSpec, TestCase


def report(valid_bytes, t=1, **case_kw):
    case = TestCase(t=t, n=len(valid_bytes), repetitions=1, **case_kw)
    clients = [CycleCounters(client_id=i + 1, mp4_valid_bytes=b) for i, b in enumerate(valid_bytes)]
    return RunReport(case=case, clients=clients, complete=True)


def test_throughput_example():
    c = CycleCounters(mp4_valid_bytes=1_250_000)
    assert throughput_per_client(c, 1) == 1e7
    (agg,) = aggregate_runs([report([1_250_000])], ["n"])
    assert agg.mean_bps == 1e7 and agg.normalized == pytest.approx(0.01)


def test_throughput_ignores_invalid():
    c = CycleCounters(mp4_received=10, mp4_valid=8, mp4_invalid=2, mp4_bytes=1000, mp4_valid_bytes=800)
    assert throughput_per_client(c, 2) == 3200


def test_mean_of_three_runs():
    rs = [report([b * 1_000_000 // 8], t=1) for b in (10, 12, 14)]
    (agg,) = aggregate_runs(rs, ["family"])
    assert agg.mean_bps == pytest.approx(12e6) and agg.samples == 3
    assert agg.variance == pytest.approx(np.var([10e6, 12e6, 14e6]))


def test_single_report_variance_zero():
    (agg,) = aggregate_runs([report([1000, 3000])], ["n"])
    assert agg.variance == 0 and agg.mean_bps == 16000


def test_skipped_runs_excluded():
    r = report([1000])
    r.skipped = "sctp unsupported"
    with pytest.raises(EmptyGroup):
        aggregate_runs([r], ["n"])


def test_invalid_group_field():
    with pytest.raises(ValueError):
        aggregate_runs([report([1])], ["colour"])


def test_groups_sorted_numerically_ranged_last():
    rs = [report([1000], frame=FrameSpec.ranged()), report([1000], frame=FrameSpec.fixed(1024)),
          report([1000], frame=FrameSpec.fixed(64))]
    assert [a.get("frame") for a in aggregate_runs(rs, ["frame"])] == ["64", "1024", "ranged"]


@given(st.lists(st.tuples(st.sampled_from([5, 10, 20]), st.integers(0, 10**7)), min_size=1, max_size=12),
       st.randoms())
def test_aggregation_permutation_invariant(runs, rnd):
    reports = [report([b] * n) for n, b in runs]
    shuffled = reports[:]
    rnd.shuffle(shuffled)
    assert aggregate_runs(reports, ["n", "t"]) == aggregate_runs(shuffled, ["n", "t"])


def test_baseline_decrease_example():
    base = AggregateStats((("family", "ipv4"), ("rule_mode", 0)), 100.0, 0.0, 3)
    ruled = AggregateStats((("family", "ipv4"), ("rule_mode", 2)), 97.75, 0.0, 3)
    assert baseline_decrease(ruled, base) == pytest.approx(2.25)


def test_baseline_errors():
    ruled = AggregateStats((("rule_mode", 2),), 97.75, 0.0, 3)
    with pytest.raises(BaselineMissing):
        baseline_decrease(ruled, None)
    with pytest.raises(BaselineMissing):
        baseline_decrease(ruled, AggregateStats((("rule_mode", 4),), 1.0, 0.0, 1))
    with pytest.raises(ZeroBaseline):
        baseline_decrease(ruled, AggregateStats((("rule_mode", 0),), 0.0, 0.0, 1))


def test_attach_decreases():
    stats = [AggregateStats((("n", 5), ("rule_mode", 0)), 200.0, 0.0, 1),
             AggregateStats((("n", 5), ("rule_mode", 2)), 190.0, 0.0, 1),
             AggregateStats((("n", 10), ("rule_mode", 4)), 50.0, 0.0, 1)]
    out = attach_decreases(stats)
    assert [s.decrease_pct for s in out] == [0.0, pytest.approx(5.0), None]


def test_per_rule_loss_example():
    pts = [(0, 0), (80, 4), (160, 8)]
    fit = per_rule_loss(pts)
    x, y = np.array(pts, dtype=float).T
    slope, intercept = np.polyfit(x, y, 1)
    assert fit.slope == pytest.approx(0.05, rel=1e-9)
    assert fit.slope == pytest.approx(slope, rel=1e-9)
    assert fit.intercept == pytest.approx(intercept, abs=1e-9)
    assert fit.r_squared == pytest.approx(1.0, rel=1e-9)


@given(st.lists(st.tuples(st.sampled_from([0, 10, 40, 80, 160, 320, 640, 1280]),
                          st.floats(-50, 50, allow_nan=False)), min_size=3, max_size=20))
def test_per_rule_loss_matches_polyfit(pts):
    xs = {x for x, _ in pts}
    if len(xs) < 2 or 0 not in xs:
        with pytest.raises(DegeneratePoints):
            per_rule_loss(pts)
        return
    fit = per_rule_loss(pts)
    x, y = np.array(pts, dtype=float).T
    slope, intercept = np.polyfit(x, y, 1)
    assert math.isclose(fit.slope, slope, rel_tol=1e-7, abs_tol=1e-9)
    resid = y - (intercept + slope * x)
    syy = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 if syy == 0 else 1 - np.sum(resid ** 2) / syy
    assert math.isclose(fit.r_squared, r2, rel_tol=1e-6, abs_tol=1e-6)


def test_per_rule_loss_degenerate():
    with pytest.raises(DegeneratePoints):
        per_rule_loss([(0, 1), (0, 2)])
    with pytest.raises(DegeneratePoints):
        per_rule_loss([(80, 1), (160, 2)])


THREADED = [(5, 110), (20, 105), (40, 100), (80, 90)]
MUX = [(5, 100), (20, 100), (40, 100), (80, 99)]


def test_turning_point_example():
    assert turning_point(THREADED, MUX) == 40


def test_turning_point_none():
    assert turning_point(MUX, THREADED) is None
    assert turning_point([(5, 2), (10, 2)], [(5, 1), (10, 1)]) is None


def test_threading_difference():
    diff = threading_difference(THREADED, MUX)
    assert diff[0] == (5, pytest.approx(10.0)) and diff[2] == (40, 0.0)


def test_grid_mismatch():
    with pytest.raises(GridMismatch):
        turning_point(THREADED, MUX[:3])
    with pytest.raises(GridMismatch):
        turning_point([(10, 1), (5, 1)], [(10, 1), (5, 1)])


def test_counters_merge_and_roundtrip():
    a = CycleCounters(client_id=1, mp1_sent_ok=3, mp4_received=3, mp4_valid=3, mp4_valid_bytes=192)
    b = CycleCounters(client_id=1, mp1_sent_ok=2, mp4_received=2, mp4_valid=1, mp4_invalid=1)
    m = a.merge(b)
    assert (m.mp1_sent_ok, m.mp4_valid, m.mp4_invalid) == (5, 4, 1)
    assert CycleCounters.from_dict(m.to_dict()) == m


def test_report_roundtrip():
    r = report([100, 200], frame=FrameSpec.ranged(64, 1024, 3))
    r.samples["client"] = [SystemSample(1.0, None, 10, 5), SystemSample(2.0, 0.5, 11, 25)]
    r.phase_trace.append(("Idle", 0.0))
    back = RunReport.from_dict(r.to_dict())
    assert back == r
    assert report_throughput(back) == 1200


def fake_reader():
    counter = itertools.count()

    def read():
        k = next(counter)
        return 100.0 * k, 25.0 * k, 1 << 20, 1000 * k
    return read


def test_sampler_cadence():
    sampler = SystemSampler(0.05, fake_reader()).start()
    time.sleep(0.52)
    samples = sampler.stop()
    assert 8 <= len(samples) <= 13
    ts = [s.timestamp for s in samples]
    assert ts == sorted(ts) and len(set(ts)) == len(ts)
    assert samples[0].cpu_utilization is None
    assert all(s.cpu_utilization == pytest.approx(0.25) for s in samples[1:])
    assert context_switch_rate(samples) == pytest.approx(1000 / 0.05, rel=0.3)


def test_sampler_marks_absent_counters():
    def broken():
        raise OSError("no /proc")
    sampler = SystemSampler(0.02, broken).start()
    time.sleep(0.1)
    samples = sampler.stop()
    assert samples and not sampler.available
    assert all(s.context_switches is None and s.cpu_utilization is None for s in samples)
    assert context_switch_rate(samples) is None


def test_sample_system_raises_without_counters():
    def broken():
        raise OSError("no /proc")
    with pytest.raises(CountersUnavailable):
        next(sample_system(0.01, reader=broken))


def test_sample_system_cadence():
    gen = sample_system(0.01, reader=fake_reader())
    first, second = next(gen), next(gen)
    assert second.timestamp > first.timestamp and second.context_switches == 1000


def test_host_sampler_smoke():
    samples = SystemSampler(0.05).start()
    time.sleep(0.12)
    got = samples.stop()
    assert got and got[-1].memory_used and got[-1].context_switches is not None


def test_csv_format():
    stats = attach_decreases(aggregate_runs(
        [report([1_250_000], rule_mode=0), report([1_237_500], rule_mode=2)], ["family", "rule_mode"]))
    buf = io.StringIO()
    write_aggregates_csv(stats, buf)
    assert buf.getvalue().splitlines() == [
        "family,rule_mode,mean_bps,normalized,decrease_pct,variance,samples",
        "ipv4,0,10000000.000000,0.010000,0.000000,0.000000,1",
        "ipv4,2,9900000.000000,0.009900,1.000000,0.000000,1",
    ]
