import os

import pytest

from fwbench.control import ControlService
from fwbench.gateway import GatewayAgent
from fwbench.server import ServerAgent

DATA = os.path.join(os.path.dirname(__file__), "data")

_criteria = {}


class FakeIptables:
    """Tiny in-memory model of the two chains the backend touches."""

    def __init__(self, fail_at=None):
        self.chains = {"filter/FORWARD": [], "mangle/PREROUTING": []}
        self.policy = "ACCEPT"
        self.fail_at = fail_at
        self.mutations = 0
        self.log = []

    def __call__(self, argv):
        self.log.append(" ".join(argv))
        args = argv[1:]
        table = "filter"
        if args[:2] == ["-t", "mangle"] or args[:2] == ["-t", "filter"]:
            table = args[1]
            args = args[2:]
        op, chain, rest = args[0], args[1], args[2:]
        key = f"{table}/{chain}"
        if op == "-S":
            lines = [f"-P {chain} {self.policy if key == 'filter/FORWARD' else 'ACCEPT'}"]
            return 0, "\n".join(lines + [f"-A {chain} " + " ".join(r) for r in self.chains[key]]) + "\n"
        self.mutations += 1
        if self.fail_at is not None and self.mutations == self.fail_at:
            return 1, "iptables: simulated failure"
        if op == "-A":
            self.chains[key].append(rest)
        elif op == "-D":
            if rest not in self.chains[key]:
                return 1, "iptables: Bad rule"
            self.chains[key].remove(rest)
        elif op == "-P":
            self.policy = rest[0]
        return 0, ""


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "setup" and rep.skipped:
        _criteria[number] = ("SKIP", title, str(rep.longrepr[-1]) if rep.longrepr else "")
    elif rep.when == "call":
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _criteria[number] = (status, title, "")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, why = _criteria[number]
        line = f"[{status}] criterion {number}: {title}"
        if why:
            line += f" ({why})"
        terminalreporter.write_line(line)


@pytest.fixture
def peers():
    """A userspace gateway and a server, each on an ephemeral control port."""
    started = []

    def start(**gateway_kw):
        gw = ControlService(GatewayAgent("userspace", **gateway_kw), "127.0.0.1", 0).start()
        sv = ControlService(ServerAgent(), "127.0.0.1", 0).start()
        started.extend([gw, sv])
        return gw, sv

    yield start
    for svc in started:
        svc.close()
