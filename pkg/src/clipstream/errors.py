"""Exception hierarchy shared by all clipstream modules."""


class ClipStreamError(Exception):
    pass


# wire
class WireError(ClipStreamError):
    pass


class OversizedPacket(WireError):
    pass


class InvalidFrame(WireError):
    pass


class Truncated(WireError):
    pass


class UnknownFrameType(WireError):
    pass


class UnknownVersion(WireError):
    pass


class EmptySet(WireError, ValueError):
    pass


# transport
class TransportError(ClipStreamError):
    pass


class VersionMismatch(TransportError):
    pass


class UnreliableNotNegotiated(TransportError):
    pass


class StreamsExhausted(TransportError):
    pass


class StreamClosed(TransportError):
    pass


class StreamReset(TransportError):
    pass


class NotEstablished(TransportError):
    pass


# media
class MediaError(ClipStreamError):
    pass


class InvalidParams(MediaError, ValueError):
    pass


class ParseError(MediaError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvariantViolation(MediaError, ValueError):
    pass


# fec
class FecError(ClipStreamError):
    pass


class PayloadTooLarge(FecError, ValueError):
    pass


class InsufficientShards(FecError):
    pass


# session
class SessionError(ClipStreamError):
    pass


class NegotiationError(SessionError):
    pass


class ControlStreamCorrupt(SessionError):
    pass


# player / metrics
class IncompleteStatuses(ClipStreamError, ValueError):
    pass


# harness
class ConfigError(ClipStreamError, ValueError):
    pass
