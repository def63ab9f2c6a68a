"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit-specific errors."""


class FormatError(ToolkitError):
    """File container is malformed (bad magic, truncated header, ...)."""


class UnsupportedError(ToolkitError):
    """File is well-formed but uses an encoding we do not handle."""


class DomainError(ToolkitError):
    """Argument value outside the documented domain."""


class ShapeError(ToolkitError):
    """Array shapes are inconsistent for the requested operation."""


class TooShortError(ToolkitError):
    """Input has fewer samples/frames than the operation requires."""


class StateError(ToolkitError):
    """API called out of order (e.g. backward before any forward)."""


class InfeasibleError(ToolkitError):
    """No valid alignment exists (CTC target longer than the frame budget)."""


class DegenerateError(ToolkitError):
    """Numerically degenerate input, e.g. cosine of a zero vector."""


class ProtocolError(ToolkitError):
    """Trial protocol cannot be satisfied by the available utterances."""
