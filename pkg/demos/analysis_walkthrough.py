"""
From runs to tables
===================

Aggregation turns run reports into group means, the decrease against
plain forwarding, a per-rule loss slope and the point where multiplexed
serving catches up with threads. The runs below are synthetic so the
numbers are easy to follow by hand.
"""

from fwbench.metrics import (CycleCounters, RunReport, aggregate_runs, attach_decreases,
                             per_rule_loss, turning_point)
from fwbench.testcase import TestCase


def run(n, mode, mbit_per_client, handling="thread"):
    case = TestCase(n=n, t=1, rule_mode=mode, handling=handling, repetitions=1)
    per_client = int(mbit_per_client * 1e6 / 8)
    return RunReport(case=case, clients=[CycleCounters(client_id=i + 1, mp4_valid_bytes=per_client)
                                         for i in range(n)], complete=True)


# 10 clients: 5% lost at 20 rules, 10% at 40, so a quarter percent per rule
reports = [run(10, 0, 100), run(10, 2, 95), run(10, 4, 90)]
stats = attach_decreases(aggregate_runs(reports, ["n", "rule_mode"]))
for s in stats:
    print(dict(s.key), f"{s.mean_bps / 1e6:.1f} Mbit/s", "decrease", s.decrease_pct)

fit = per_rule_loss([(s.get("rule_mode") * s.get("n"), s.decrease_pct) for s in stats])
print(f"loss per rule: {fit.slope:.3f} %  (r^2 {fit.r_squared:.3f})")

# threads lead while clients are few, then multiplexing pulls level
threaded = [(5, 110), (20, 105), (40, 100), (80, 90)]
multiplexed = [(5, 100), (20, 100), (40, 100), (80, 99)]
print("turning point at n =", turning_point(threaded, multiplexed))
