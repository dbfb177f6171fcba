"""Exception types raised across the package."""


class ProxyTrError(Exception):
    """Base class for package errors."""


class DimensionError(ProxyTrError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(ProxyTrError, ValueError):
    """An argument lies outside the operation's domain (counts, ranges, empty input)."""


class DegenerateInputError(DomainError):
    """Input is well-formed but geometrically degenerate."""


class UsageError(ProxyTrError, ValueError):
    """An API was called in a way its contract forbids."""


class CheckpointError(ProxyTrError, IOError):
    """A checkpoint container is malformed, truncated or of the wrong version."""


class NonFiniteLossError(ProxyTrError, FloatingPointError):
    """A loss term became NaN or infinite during training."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value


class ParseError(ProxyTrError, ValueError):
    """A text input file is malformed; the message names the line."""
