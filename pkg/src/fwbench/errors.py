"""Exception hierarchy shared by all components."""


class BenchError(Exception):
    """Base class for every error raised by fwbench."""


# parameter validation

class ValidationError(BenchError, ValueError):
    pass


class FrameTooSmall(ValidationError):
    pass


class FrameOutOfRange(ValidationError):
    pass


class BadRuleMode(ValidationError):
    pass


class NonPositive(ValidationError):
    pass


class EmptyAxis(ValidationError):
    pass


# control protocol

class ProtocolError(BenchError):
    pass


class MalformedFrame(ProtocolError):
    pass


class UnknownVariant(ProtocolError):
    pass


class SchemaViolation(ProtocolError):
    pass


class PeerUnreachable(BenchError):
    pass


class ConfigRejected(BenchError):
    def __init__(self, peer, code, message):
        super().__init__(f"{peer} rejected configuration: {code}: {message}")
        self.peer = peer
        self.code = code
        self.message = message


class ControlTimeout(BenchError, TimeoutError):
    def __init__(self, phase):
        super().__init__(f"timed out waiting for reply during {phase}")
        self.phase = phase


# data plane

class TooShort(BenchError):
    pass


class ZeroClientId(BenchError):
    pass


class SendTimeout(BenchError, TimeoutError):
    pass


class ConnectionLost(BenchError, ConnectionError):
    pass


class ProtocolUnavailable(BenchError):
    """The host kernel lacks support for the requested transport (SCTP)."""


# server / forwarder

class BindFailed(BenchError, OSError):
    pass


class AcceptFailed(BenchError, OSError):
    pass


class OverCapacity(BenchError):
    pass


class UpstreamUnreachable(BenchError):
    pass


# gateway rules

class AddressFamilyMismatch(BenchError, ValueError):
    pass


class PrivilegeError(BenchError, PermissionError):
    pass


class CommandFailed(BenchError):
    def __init__(self, index, command, detail=""):
        super().__init__(f"command #{index} failed: {command}" + (f" ({detail})" if detail else ""))
        self.index = index
        self.command = command


class RestoreIncomplete(BenchError):
    pass


# statistics

class EmptyGroup(BenchError, ValueError):
    pass


class BaselineMissing(BenchError, ValueError):
    pass


class ZeroBaseline(BenchError, ZeroDivisionError):
    pass


class DegeneratePoints(BenchError, ValueError):
    pass


class GridMismatch(BenchError, ValueError):
    pass


class CountersUnavailable(BenchError):
    pass


class MalformedRecord(BenchError, ValueError):
    def __init__(self, line, detail=""):
        super().__init__(f"malformed record on line {line}" + (f": {detail}" if detail else ""))
        self.line = line
