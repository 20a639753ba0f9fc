"""
Expanding the experiment matrix
===============================

Every run of the benchmark is one test case: a client count, a frame
size, a transport, an address family, a server handling strategy and a
rule mode. The standard matrix crosses all of them.
"""

from collections import Counter

from fwbench.testcase import MatrixSpec, expand_matrix, rule_count, scheduled_runs

# the full default grid, with short runs so nothing here takes long
spec = MatrixSpec.standard(t=1, repetitions=3)
cases = expand_matrix(spec)
print(len(cases), "cases,", scheduled_runs(cases), "runs")

# UDP has no connections, so it contributes a single handling strategy
print(Counter(c.protocol.value for c in cases))

# cases come out in a fixed order; the key is what the run journal records
for case in cases[:3]:
    print(case.key)

# rule count grows with clients: F rules per client
biggest = max(cases, key=rule_count)
print("largest rule set:", rule_count(biggest), "rules for", biggest.key)
