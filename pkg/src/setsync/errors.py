"""Exception types shared across the toolkit."""


class SetsyncError(Exception):
    """Base class for all setsync errors."""


class ShapeMismatch(SetsyncError):
    """Two structures with incompatible size/seed were combined."""


class MalformedBytes(SetsyncError):
    """A serialized payload was truncated or had a bad header."""


class DecodeFailed(SetsyncError):
    """IBLT peeling left residual cells (difference exceeded capacity)."""


class VerifyMismatch(SetsyncError):
    """Recovered data failed the whole-object verification hash."""

    def __init__(self, stage="final"):
        super().__init__(f"verification hash mismatch at stage {stage!r}")
        self.stage = stage


class InterpolationFailure(SetsyncError):
    """Rational interpolation was inconsistent or roots left the universe."""


class RangeExceeded(SetsyncError):
    """A value does not fit the pair-encoding widths."""


class NoMatchFound(SetsyncError):
    """A child IBLT decoded with none of the candidate partners."""


class ResidualChildren(SetsyncError):
    """Child sets remained unrecovered after the final cascade level."""


class GiveUp(SetsyncError):
    """Repeated doubling exceeded the total element count."""


class OracleScaleExceeded(SetsyncError):
    """An exact oracle was asked to run beyond its intended scale."""


class ScaleExceeded(SetsyncError):
    """An exhaustive check was asked to run beyond its intended scale."""


class AmbiguousMatch(SetsyncError):
    """Two candidate signatures fell within the matching threshold."""


class ReconstructionFailure(SetsyncError):
    """Signature data did not describe a consistent forest."""


class FramingError(SetsyncError):
    """A frame failed magic/length/CRC validation."""


class PeerDisconnected(SetsyncError):
    """The byte stream ended mid-session."""


class ProtocolViolation(SetsyncError):
    """An unexpected message type arrived for the current state."""


class InvalidParams(SetsyncError):
    """Instance-generation or protocol parameters are out of range."""
