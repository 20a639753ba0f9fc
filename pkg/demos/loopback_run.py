"""
One experiment over loopback
============================

Start a userspace gateway and an echo server in this process, then let
the orchestrator drive a short run through them, exactly as the
``fwbench run`` command would across three machines.
"""

from fwbench.control import ControlService, orchestrate
from fwbench.gateway import GatewayAgent
from fwbench.metrics import report_throughput
from fwbench.server import ServerAgent
from fwbench.testcase import FrameSpec, TestCase

gateway = ControlService(GatewayAgent("userspace"), "127.0.0.1", 0).start()
server = ControlService(ServerAgent(), "127.0.0.1", 0).start()

case = TestCase(n=4, t=2, frame=FrameSpec.ranged(64, 1024, seed=1), protocol="tcp",
                family="ipv4", handling="epoll", rule_mode=2, repetitions=1)
report = orchestrate(case, gateway.address, server.address, sample_interval=0.5)

# phases the orchestrator went through
print(" -> ".join(report.phases))

totals = report.totals()
print("valid frames:", totals.mp4_valid, " invalid:", totals.mp4_invalid, " gaps:", totals.gap_events)
print("rules while running:", report.gateway["rule_count"],
      " after teardown:", report.gateway["rules_after_teardown"])
print(f"mean per-client goodput: {report_throughput(report) / 1e6:.1f} Mbit/s")

gateway.close()
server.close()
