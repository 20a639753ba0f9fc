"""Experiment parameter vectors: one :class:`TestCase` per run, and the
:class:`MatrixSpec` that expands into the full set of combinations.

Symbols follow the usual benchmark notation::

    n  client count          P  transport protocol
    t  duration (seconds)    A  address family
    f  frame size            T  connection handling (stream protocols only)
                             F  filter rules per client (0, 2 or 4)
"""
from __future__ import annotations

import dataclasses
import enum
import itertools
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .errors import (BadRuleMode, EmptyAxis, FrameOutOfRange, FrameTooSmall,
                     NonPositive, ValidationError)

#: client id, frame size and low 32 bits of the sequence number, 4 bytes each
HEADER_SIZE = 12
MIN_FRAME = 64
MAX_FRAME = 1024
RULE_MODES = (0, 2, 4)
DEFAULT_REPETITIONS = 3


class Protocol(str, enum.Enum):
    TCP = "tcp"
    UDP = "udp"
    SCTP = "sctp"

    @property
    def is_stream(self) -> bool:
        return self is not Protocol.UDP


class Family(str, enum.Enum):
    IPV4 = "ipv4"
    IPV6 = "ipv6"


class Handling(str, enum.Enum):
    THREAD = "thread"
    MULTIPLEXED = "epoll"


def _enum(cls, value):
    if isinstance(value, cls):
        return value
    try:
        return cls(str(value).lower())
    except ValueError:
        names = ", ".join(m.value for m in cls)
        raise ValidationError(f"{value!r} is not a valid {cls.__name__} ({names})") from None


@dataclass(frozen=True)
class FrameSpec:
    kind: str = "fixed"
    fixed_bytes: int | None = 64
    min_bytes: int | None = None
    max_bytes: int | None = None
    seed: int | None = None

    @classmethod
    def fixed(cls, size: int) -> "FrameSpec":
        return cls("fixed", fixed_bytes=int(size))

    @classmethod
    def ranged(cls, lo: int = MIN_FRAME, hi: int = MAX_FRAME, seed: int = 0) -> "FrameSpec":
        return cls("ranged", fixed_bytes=None, min_bytes=int(lo), max_bytes=int(hi),
                   seed=int(seed) & 0xFFFFFFFFFFFFFFFF)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "FrameSpec":
        """Parse ``"512"`` or ``"64:1024"`` (the ``-f`` flag syntax)."""
        text = str(text).strip()
        try:
            if ":" in text:
                lo, hi = text.split(":", 1)
                return cls.ranged(int(lo), int(hi), seed)
            if text.lower() == "ranged":
                return cls.ranged(MIN_FRAME, MAX_FRAME, seed)
            return cls.fixed(int(text))
        except ValueError:
            raise ValidationError(f"cannot parse frame size {text!r}") from None

    @property
    def is_ranged(self) -> bool:
        return self.kind == "ranged"

    @property
    def label(self) -> str:
        return "ranged" if self.is_ranged else str(self.fixed_bytes)

    @property
    def largest(self) -> int:
        return self.max_bytes if self.is_ranged else self.fixed_bytes

    def check(self) -> None:
        if self.kind == "fixed":
            size = self.fixed_bytes
            if size is None or size < HEADER_SIZE:
                raise FrameTooSmall(f"frame size {size} is below the {HEADER_SIZE}-byte header")
            if not MIN_FRAME <= size <= MAX_FRAME:
                raise FrameOutOfRange(f"frame size {size} outside [{MIN_FRAME}, {MAX_FRAME}]")
        elif self.kind == "ranged":
            lo, hi = self.min_bytes, self.max_bytes
            if lo is None or hi is None:
                raise ValidationError("ranged frame spec needs min_bytes and max_bytes")
            if lo < HEADER_SIZE:
                raise FrameTooSmall(f"frame size {lo} is below the {HEADER_SIZE}-byte header")
            if not MIN_FRAME <= lo <= hi <= MAX_FRAME:
                raise FrameOutOfRange(f"frame range {lo}:{hi} outside [{MIN_FRAME}, {MAX_FRAME}]")
        else:
            raise ValidationError(f"unknown frame kind {self.kind!r}")

    def to_dict(self) -> dict:
        if self.is_ranged:
            return {"kind": "ranged", "min_bytes": self.min_bytes,
                    "max_bytes": self.max_bytes, "seed": self.seed}
        return {"kind": "fixed", "fixed_bytes": self.fixed_bytes}

    @classmethod
    def from_dict(cls, d: Any) -> "FrameSpec":
        if isinstance(d, (int, str)):
            return cls.parse(str(d))
        kind = d.get("kind", "fixed")
        if kind == "ranged":
            return cls.ranged(d["min_bytes"], d["max_bytes"], d.get("seed", 0))
        return cls.fixed(d["fixed_bytes"])


@dataclass(frozen=True)
class TestCase:
    n: int = 5
    t: float = 100.0
    frame: FrameSpec = field(default_factory=lambda: FrameSpec.fixed(64))
    protocol: Protocol = Protocol.TCP
    family: Family = Family.IPV4
    handling: Handling = Handling.THREAD
    rule_mode: int = 0
    repetitions: int = DEFAULT_REPETITIONS

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        object.__setattr__(self, "protocol", _enum(Protocol, self.protocol))
        object.__setattr__(self, "family", _enum(Family, self.family))
        object.__setattr__(self, "handling", _enum(Handling, self.handling))

    @property
    def key(self) -> str:
        """Stable identifier, independent of repetitions (used by the matrix journal)."""
        return (f"{self.family.value}/{self.protocol.value}/{self.handling.value}"
                f"/F{self.rule_mode}/f{self.frame.label}/n{self.n}/t{self.t:g}")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "t": self.t,
            "frame": self.frame.to_dict(),
            "protocol": self.protocol.value,
            "family": self.family.value,
            "handling": self.handling.value,
            "rule_mode": self.rule_mode,
            "repetitions": self.repetitions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TestCase":
        try:
            return cls(
                n=int(d["n"]),
                t=float(d["t"]),
                frame=FrameSpec.from_dict(d["frame"]),
                protocol=d["protocol"],
                family=d["family"],
                handling=d.get("handling", Handling.MULTIPLEXED.value),
                rule_mode=int(d["rule_mode"]),
                repetitions=int(d.get("repetitions", DEFAULT_REPETITIONS)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"incomplete test case: {exc}") from None


def validate(case: TestCase) -> TestCase:
    """Check every parameter and return the normalized case.

    UDP has no connection-handling choice, so its ``handling`` is always
    rewritten to :attr:`Handling.MULTIPLEXED`.
    """
    if not isinstance(case.n, int) or case.n <= 0:
        raise NonPositive(f"n must be a positive integer, got {case.n!r}")
    if not case.t > 0:
        raise NonPositive(f"t must be positive, got {case.t!r}")
    if not isinstance(case.repetitions, int) or case.repetitions <= 0:
        raise NonPositive(f"repetitions must be a positive integer, got {case.repetitions!r}")
    if case.rule_mode not in RULE_MODES:
        raise BadRuleMode(f"rule mode must be one of {RULE_MODES}, got {case.rule_mode!r}")
    case.frame.check()
    if not case.protocol.is_stream and case.handling is not Handling.MULTIPLEXED:
        case = dataclasses.replace(case, handling=Handling.MULTIPLEXED)
    return case


def rule_count(case: TestCase) -> int:
    return case.rule_mode * case.n


@dataclass(frozen=True)
class MatrixSpec:
    n_values: Sequence[int]
    frame_values: Sequence[FrameSpec]
    protocols: Sequence[Protocol]
    families: Sequence[Family]
    handlings: Sequence[Handling]
    rule_modes: Sequence[int]
    t: float = 100.0
    repetitions: int = DEFAULT_REPETITIONS

    def __post_init__(self):
        object.__setattr__(self, "n_values", tuple(int(v) for v in self.n_values))
        object.__setattr__(self, "frame_values", tuple(
            v if isinstance(v, FrameSpec) else FrameSpec.from_dict(v) for v in self.frame_values))
        object.__setattr__(self, "protocols", tuple(_enum(Protocol, v) for v in self.protocols))
        object.__setattr__(self, "families", tuple(_enum(Family, v) for v in self.families))
        object.__setattr__(self, "handlings", tuple(_enum(Handling, v) for v in self.handlings))
        object.__setattr__(self, "rule_modes", tuple(int(v) for v in self.rule_modes))

    @classmethod
    def standard(cls, t: float = 100.0, repetitions: int = DEFAULT_REPETITIONS,
                 seed: int = 0) -> "MatrixSpec":
        frames = [FrameSpec.fixed(s) for s in (64, 128, 256, 512, 1024)]
        frames.append(FrameSpec.ranged(MIN_FRAME, MAX_FRAME, seed))
        return cls(
            n_values=(5, 10, 20, 40, 80, 160, 320),
            frame_values=frames,
            protocols=(Protocol.TCP, Protocol.UDP, Protocol.SCTP),
            families=(Family.IPV4, Family.IPV6),
            handlings=(Handling.THREAD, Handling.MULTIPLEXED),
            rule_modes=RULE_MODES,
            t=t,
            repetitions=repetitions,
        )

    def handlings_for(self, protocol: Protocol) -> tuple[Handling, ...]:
        if protocol.is_stream:
            return tuple(self.handlings)
        # handling is meaningless for datagrams; one run regardless of the axis
        return (Handling.MULTIPLEXED,)

    def expected_size(self) -> int:
        per_protocol = sum(len(self.handlings_for(p)) for p in self.protocols)
        return (per_protocol * len(self.n_values) * len(self.frame_values)
                * len(self.families) * len(self.rule_modes))

    def to_dict(self) -> dict:
        return {
            "n_values": list(self.n_values),
            "frame_values": [f.to_dict() for f in self.frame_values],
            "protocols": [p.value for p in self.protocols],
            "families": [a.value for a in self.families],
            "handlings": [h.value for h in self.handlings],
            "rule_modes": list(self.rule_modes),
            "t": self.t,
            "repetitions": self.repetitions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatrixSpec":
        try:
            return cls(
                n_values=d["n_values"],
                frame_values=d["frame_values"],
                protocols=d["protocols"],
                families=d["families"],
                handlings=d.get("handlings", [h.value for h in Handling]),
                rule_modes=d["rule_modes"],
                t=float(d.get("t", 100.0)),
                repetitions=int(d.get("repetitions", DEFAULT_REPETITIONS)),
            )
        except KeyError as exc:
            raise ValidationError(f"matrix spec missing {exc}") from None


def expand_matrix(spec: MatrixSpec) -> list[TestCase]:
    """Enumerate every case of ``spec``.

    Ordering is lexicographic over (family, protocol, handling, rule_mode,
    frame, n), each axis in the order given, so consecutive runs share the
    gateway configuration as long as possible.
    """
    axes = {
        "n_values": spec.n_values, "frame_values": spec.frame_values,
        "protocols": spec.protocols, "families": spec.families,
        "handlings": spec.handlings, "rule_modes": spec.rule_modes,
    }
    for name, values in axes.items():
        if not values:
            raise EmptyAxis(f"matrix axis {name} is empty")

    cases = []
    for family, protocol in itertools.product(spec.families, spec.protocols):
        for handling, rule_mode, frame, n in itertools.product(
                spec.handlings_for(protocol), spec.rule_modes, spec.frame_values, spec.n_values):
            cases.append(validate(TestCase(
                n=n, t=spec.t, frame=frame, protocol=protocol, family=family,
                handling=handling, rule_mode=rule_mode, repetitions=spec.repetitions)))
    return cases


def scheduled_runs(cases: Iterable[TestCase]) -> int:
    return sum(c.repetitions for c in cases)
