"""Exception hierarchy shared across the pipeline.

Exit-code mapping (see cli.dispatch): ValidationError and subclasses exit 1,
ProtocolError/TransportError exit 2, usage problems exit 64.
"""

from __future__ import annotations


class ExpstarError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(ExpstarError):
    """Input data violates a schema, invariant, or precondition."""


class CommentaryParseError(ValidationError):
    """Tagged commentary text could not be parsed."""


class IndexFormatError(ValidationError):
    """A persisted knowledge index is malformed or version-incompatible."""


class DegenerateInputError(ValidationError):
    """Numerically degenerate input, e.g. a zero vector where a direction is needed."""


class ContextOverflowError(ValidationError):
    """Generation context cannot fit the token budget even after truncation."""


class ProtocolError(ExpstarError):
    """A judge or generator reply violated its wire contract."""

    def __init__(self, message: str, raw_reply: str | None = None):
        super().__init__(message)
        self.raw_reply = raw_reply


class GenerationFormatError(ProtocolError):
    """Generator output failed commentary parsing."""


class TransportError(ExpstarError):
    """A remote judge/generator/scorer endpoint could not be reached."""
