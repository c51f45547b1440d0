"""Exception hierarchy shared across the package."""


class FSRealError(Exception):
    """Base class for all errors raised by fsreal."""


class ConfigError(FSRealError, ValueError):
    pass


class ShapeError(FSRealError, ValueError):
    pass


class ProtocolError(FSRealError):
    pass


class MetricError(FSRealError, ValueError):
    pass


class EncodeError(FSRealError, ValueError):
    pass


class DecodeError(FSRealError, ValueError):
    """Malformed codec payload. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class FramingError(FSRealError, ValueError):
    """Malformed wire frame, naming the offending field and its byte offset."""

    def __init__(self, message: str, field: str, offset: int):
        super().__init__(f"{field}: {message} (at byte offset {offset})")
        self.field = field
        self.offset = offset


class ShortReadError(FramingError):
    pass


class VerificationError(FSRealError):
    """A recorded run does not reproduce."""
