"""Command-line entry points: ``fwbench {server,gateway,run,matrix,analyze}``.

Exit codes: 0 success, 1 invalid parameters, 2 peer or protocol failure,
3 file I/O or unreadable results.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import control
from .errors import (BenchError, BindFailed, ConfigRejected, ConnectionLost,
                     ControlTimeout, EmptyGroup, PeerUnreachable, PrivilegeError,
                     ProtocolError, RestoreIncomplete, ValidationError)
from .testcase import (FrameSpec, Handling, MatrixSpec, Protocol, TestCase,
                       expand_matrix, scheduled_runs, validate)

log = logging.getLogger("fwbench")

EXIT_OK, EXIT_VALIDATION, EXIT_PEER, EXIT_IO = 0, 1, 2, 3


def parse_endpoint(text: str, default_port: int) -> tuple[str, int]:
    """``host``, ``host:port``, ``[v6]:port`` or a bare IPv6 literal."""
    text = text.strip()
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        return host, int(rest[1:]) if rest.startswith(":") else default_port
    if text.count(":") == 1:
        host, port = text.split(":")
        return host, int(port)
    return text, default_port


def _setup_logging(verbose: int):
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s",
                        stream=sys.stderr)


# server / gateway ---------------------------------------------------------

def cmd_server(args) -> int:
    from .server import ServerAgent
    try:
        svc = control.ControlService(ServerAgent(args.data_host, args.sample_interval),
                                     args.host, args.control_port, args.sessions)
    except BindFailed as exc:
        print(f"server: cannot listen on control port {args.control_port}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"server control listening on {svc.address[0]}:{svc.port}", file=sys.stderr, flush=True)
    try:
        svc.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_gateway(args) -> int:
    from .gateway import ApplyReceipt, GatewayAgent, NetfilterBackend, make_backend
    if args.restore_receipt:
        try:
            receipt = ApplyReceipt.load(args.restore_receipt)
        except (OSError, ValueError, TypeError) as exc:
            print(f"gateway: cannot read receipt {args.restore_receipt}: {exc}", file=sys.stderr)
            return EXIT_IO
        backend = make_backend(receipt.backend)
        try:
            if isinstance(backend, NetfilterBackend):
                backend.ensure_privileges(receipt.family)
            backend.restore(receipt)
        except (PrivilegeError, RestoreIncomplete, BenchError) as exc:
            print(f"gateway: restore failed: {exc}", file=sys.stderr)
            return EXIT_PEER
        Path(args.restore_receipt).unlink(missing_ok=True)
        print(f"gateway: restored {len(receipt.inverse)} commands from {args.restore_receipt}",
              file=sys.stderr)
        return EXIT_OK

    backend = make_backend(args.backend)
    if isinstance(backend, NetfilterBackend):
        try:
            backend.ensure_privileges()
        except PrivilegeError as exc:
            print(f"gateway: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
    agent = GatewayAgent(backend, args.listen_host, args.receipt, args.sample_interval)
    try:
        svc = control.ControlService(agent, args.host, args.control_port, args.sessions)
    except BindFailed as exc:
        print(f"gateway: cannot listen on control port {args.control_port}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"gateway ({backend.name}) control listening on {svc.address[0]}:{svc.port}",
          file=sys.stderr, flush=True)
    try:
        svc.serve_forever()
    except KeyboardInterrupt:
        agent.teardown()
    return EXIT_OK


# run / matrix -------------------------------------------------------------

def _case_from_args(args) -> TestCase:
    frame = FrameSpec.parse(args.frame, args.seed)
    case = TestCase(n=args.n, t=args.t, frame=frame, protocol=args.protocol, family=args.family,
                    handling=args.handling, rule_mode=args.rules, repetitions=args.repetitions)
    normalized = validate(case)
    if normalized.handling is not case.handling:
        print(f"note: handling normalized to {normalized.handling.value} for {case.protocol.value}",
              file=sys.stderr)
    return normalized


def _peer_error_code(exc) -> int:
    if isinstance(exc, (PeerUnreachable, ConfigRejected, ControlTimeout, ConnectionLost, ProtocolError)):
        return EXIT_PEER
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_PEER


def _run_case(case, ep, results, repetitions, journal=None, done=frozenset()):
    from .report import append_report
    for rep in range(repetitions):
        key = f"{case.key}#{rep}"
        if key in done:
            continue
        report = control.orchestrate(
            case, ep["gateway"], ep["server"], client_addr=ep.get("client_addr"),
            repetition=rep, sample_interval=ep.get("sample_interval", 1.0))
        append_report(results, report)
        status = "skipped" if report.skipped else ("done" if report.complete else "incomplete")
        print(f"{case.key} rep={rep} {status}", file=sys.stderr, flush=True)
        if journal is not None:
            with open(journal, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"key": key, "status": status}) + "\n")


def _endpoints(args) -> dict:
    gw = None if args.no_gateway else parse_endpoint(args.gateway, control.GATEWAY_PORT)
    return {"gateway": gw, "server": parse_endpoint(args.server, control.SERVER_PORT),
            "client_addr": args.client_addr, "sample_interval": args.sample_interval}


def cmd_run(args) -> int:
    try:
        case = _case_from_args(args)
    except ValidationError as exc:
        print(f"run: invalid parameters: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        _run_case(case, _endpoints(args), args.results, case.repetitions)
    except (BenchError, OSError) as exc:
        print(f"run: {exc}", file=sys.stderr)
        return _peer_error_code(exc)
    return EXIT_OK


@dataclass
class RunManifest:
    cases: list[TestCase]
    gateway: tuple | None = ("127.0.0.1", control.GATEWAY_PORT)
    server: tuple = ("127.0.0.1", control.SERVER_PORT)
    backend: str = "userspace"
    results: str = "results.jsonl"
    journal: str | None = None
    client_addr: str | None = None
    seed: int = 0
    sample_interval: float = 1.0

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        return cls.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        seed = int(d.get("seed", 0))
        if "matrix" in d:
            m = dict(d["matrix"])
            spec = MatrixSpec.from_dict(m)
            spec = dataclasses.replace(spec, frame_values=tuple(
                dataclasses.replace(f, seed=seed) if f.is_ranged else f for f in spec.frame_values))
            cases = expand_matrix(spec)
        elif "cases" in d:
            cases = [validate(TestCase.from_dict(c)) for c in d["cases"]]
        else:
            raise ValidationError("manifest needs 'matrix' or 'cases'")
        gw = d.get("gateway", "127.0.0.1:%d" % control.GATEWAY_PORT)
        return cls(
            cases=cases,
            gateway=None if gw is None else parse_endpoint(gw, control.GATEWAY_PORT),
            server=parse_endpoint(d.get("server", "127.0.0.1:%d" % control.SERVER_PORT), control.SERVER_PORT),
            backend=d.get("backend", "userspace"),
            results=d.get("results", "results.jsonl"),
            journal=d.get("journal"),
            client_addr=d.get("client_addr"),
            seed=seed,
            sample_interval=float(d.get("sample_interval", 1.0)),
        )


def cmd_matrix(args) -> int:
    try:
        if args.standard:
            spec = MatrixSpec.standard(t=args.t, repetitions=args.repetitions, seed=args.seed)
            manifest = RunManifest(expand_matrix(spec), seed=args.seed)
        elif args.manifest:
            manifest = RunManifest.load(args.manifest)
        else:
            print("matrix: give a manifest file or --standard", file=sys.stderr)
            return EXIT_VALIDATION
    except (ValidationError, KeyError, ValueError) as exc:
        print(f"matrix: invalid manifest: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"matrix: cannot read manifest: {exc}", file=sys.stderr)
        return EXIT_IO

    if args.results:
        manifest.results = args.results
    if args.journal:
        manifest.journal = args.journal

    if args.dry_run:
        for case in manifest.cases:
            print(case.key)
        print(f"{len(manifest.cases)} cases, {scheduled_runs(manifest.cases)} runs", file=sys.stderr)
        return EXIT_OK

    journal = manifest.journal or (manifest.results + ".journal")
    done = set()
    if os.path.exists(journal):
        with open(journal, encoding="utf-8") as fh:
            for line in fh:
                try:
                    done.add(json.loads(line)["key"])
                except (ValueError, KeyError):
                    continue
    ep = {"gateway": manifest.gateway, "server": manifest.server,
          "client_addr": manifest.client_addr, "sample_interval": manifest.sample_interval}
    try:
        for case in manifest.cases:
            _run_case(case, ep, manifest.results, case.repetitions, journal, done)
    except (BenchError, OSError) as exc:
        print(f"matrix: aborting: {exc}", file=sys.stderr)
        return _peer_error_code(exc)
    return EXIT_OK


# analyze ------------------------------------------------------------------

def cmd_analyze(args) -> int:
    from .report import analyze, grouped_csv, read_reports, write_analysis
    errors: list = []
    try:
        reports = read_reports(args.results, errors)
    except OSError as exc:
        print(f"analyze: cannot read {args.results}: {exc}", file=sys.stderr)
        return EXIT_IO
    for err in errors:
        print(f"analyze: {err}", file=sys.stderr)
    if not reports:
        print("analyze: no records parsed", file=sys.stderr)
        return EXIT_IO
    group_by = tuple(g.strip() for g in args.group_by.split(",") if g.strip())
    try:
        sys.stdout.write(grouped_csv(reports, group_by))
        if args.out_dir:
            for p in write_analysis(analyze(reports), args.out_dir):
                print(f"wrote {p}", file=sys.stderr)
    except EmptyGroup as exc:
        print(f"analyze: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"analyze: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


# argument parsing ---------------------------------------------------------

def _add_endpoint_flags(p):
    p.add_argument("--gateway", default=os.environ.get("FWBENCH_GATEWAY", f"127.0.0.1:{control.GATEWAY_PORT}"),
                   help="gateway control endpoint (env FWBENCH_GATEWAY)")
    p.add_argument("--server", default=os.environ.get("FWBENCH_SERVER", f"127.0.0.1:{control.SERVER_PORT}"),
                   help="server control endpoint (env FWBENCH_SERVER)")
    p.add_argument("--no-gateway", action="store_true", help="talk to the server directly")
    p.add_argument("--client-addr", default=os.environ.get("FWBENCH_CLIENT_ADDR"),
                   help="client address used in generated rules (default: loopback)")
    p.add_argument("--sample-interval", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fwbench", description="Packet-filter throughput benchmark")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("server", help="run the echo server component")
    p.add_argument("--host", default="127.0.0.1", help="control bind address")
    p.add_argument("--control-port", type=int, default=control.SERVER_PORT)
    p.add_argument("--data-host", default=None, help="data bind address (default: loopback of the case family)")
    p.add_argument("--sessions", type=int, default=None, help="exit after this many control sessions")
    p.add_argument("--sample-interval", type=float, default=1.0)
    p.set_defaults(func=cmd_server)

    p = sub.add_parser("gateway", help="run the gateway component")
    p.add_argument("--backend", choices=("netfilter", "userspace"), default="userspace")
    p.add_argument("--host", default="127.0.0.1", help="control bind address")
    p.add_argument("--control-port", type=int, default=control.GATEWAY_PORT)
    p.add_argument("--listen-host", default=None, help="client-facing forwarder address")
    p.add_argument("--receipt", default=None, help="persist the apply receipt here")
    p.add_argument("--restore-receipt", default=None, help="undo a persisted receipt and exit")
    p.add_argument("--sessions", type=int, default=None)
    p.add_argument("--sample-interval", type=float, default=1.0)
    p.set_defaults(func=cmd_gateway)

    p = sub.add_parser("run", help="run one test case")
    p.add_argument("-n", type=int, default=5, help="client threads")
    p.add_argument("-t", type=float, default=100.0, help="duration in seconds")
    p.add_argument("-f", dest="frame", default="64", help="frame size, or min:max for ranged")
    p.add_argument("-P", dest="protocol", default="tcp", type=str.lower, choices=[v.value for v in Protocol])
    p.add_argument("-A", dest="family", default="ipv4", type=str.lower, choices=("ipv4", "ipv6"))
    p.add_argument("-T", dest="handling", default="thread", type=str.lower, choices=[v.value for v in Handling])
    p.add_argument("-F", dest="rules", type=int, default=0, help="rules per client: 0, 2 or 4")
    p.add_argument("-r", "--repetitions", type=int, default=3)
    p.add_argument("--seed", type=int, default=0, help="frame-size PRNG seed for ranged frames")
    p.add_argument("--results", default="results.jsonl")
    _add_endpoint_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("matrix", help="run every case of a manifest")
    p.add_argument("manifest", nargs="?")
    p.add_argument("--standard", action="store_true", help="use the full default parameter matrix")
    p.add_argument("--dry-run", action="store_true", help="print the cases, run nothing")
    p.add_argument("-t", type=float, default=100.0, help="duration for --standard")
    p.add_argument("-r", "--repetitions", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--results", default=None)
    p.add_argument("--journal", default=None)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("analyze", help="aggregate a results file into CSV")
    p.add_argument("results")
    p.add_argument("--group-by", default="family,protocol,n")
    p.add_argument("--out-dir", default=None, help="also write the standard tables here")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
