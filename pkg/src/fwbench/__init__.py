"""Distributed throughput benchmark for packet-filtering routers."""

from .testcase import (FrameSpec, Family, Handling, MatrixSpec, Protocol, TestCase,
                       expand_matrix, rule_count, validate)
from .dataplane import FrameRecord, decode_frame, encode_frame, validate_frame
from .gateway import (RuleSet, RuleSpec, PacketMeta, evaluate, generate_rules,
                      render_netfilter_commands)
from .metrics import (CycleCounters, RunReport, aggregate_runs, baseline_decrease,
                      per_rule_loss, throughput_per_client, turning_point)
from .control import orchestrate

__all__ = [
    "FrameSpec", "Family", "Handling", "MatrixSpec", "Protocol", "TestCase", "expand_matrix",
    "rule_count", "validate", "FrameRecord", "decode_frame", "encode_frame", "validate_frame",
    "RuleSet", "RuleSpec", "PacketMeta", "evaluate", "generate_rules", "render_netfilter_commands",
    "CycleCounters", "RunReport", "aggregate_runs", "baseline_decrease", "per_rule_loss",
    "throughput_per_client", "turning_point", "orchestrate",
]

__version__ = "0.1.0"
