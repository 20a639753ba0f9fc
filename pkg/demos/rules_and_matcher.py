"""
Rules, rendering and the first-match scan
=========================================

Rule mode F=2 gives each client an accept rule per direction under a
drop policy; F=4 adds a QoS mark per direction. The same rule set can be
rendered as iptables commands or evaluated in user space.
"""

import time

from fwbench.gateway import PacketMeta, evaluate, generate_rules, render_netfilter_commands
from fwbench.testcase import TestCase

case = TestCase(n=2, t=1, rule_mode=4, protocol="tcp", family="ipv4", repetitions=1)
rules = generate_rules(case, ["10.0.1.2", "10.0.1.3"], "10.0.2.2")

# the commands a kernel backend would run, policy last
for line in render_netfilter_commands(rules, case.family):
    print(line)

# a packet from the first client hits the first mangle and first filter rule
hit = evaluate(PacketMeta.of("10.0.1.2", "10.0.2.2", "tcp"), rules)
print(hit)

# an unknown source walks every rule and falls through to the policy
miss = evaluate(PacketMeta.of("192.0.2.9", "10.0.2.2", "tcp"), rules)
print(miss)

# cost of a miss grows with the rule count
stranger = PacketMeta.of("192.0.2.9", "10.0.2.2", "tcp")
for n in (10, 100, 1000):
    big = generate_rules(TestCase(n=n, t=1, rule_mode=2, repetitions=1),
                         [f"10.1.{i // 250}.{i % 250 + 1}" for i in range(n)], "10.0.2.2")
    start = time.perf_counter()
    for _ in range(200):
        v = evaluate(stranger, big)
    per_packet = (time.perf_counter() - start) / 200
    print(f"{len(big):5d} rules  {v.comparisons:5d} comparisons  {per_packet * 1e6:8.1f} us")
