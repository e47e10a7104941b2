"""
NP-FKGC - Exception Hierarchy
Every error raised by the engine derives from FKGCError so callers can catch one type.
"""

from typing import Optional


class FKGCError(Exception):
    """Base class for all engine errors."""


class DimensionError(FKGCError, ValueError):
    """Tensor or vector shapes do not agree."""


class DomainError(FKGCError, ValueError):
    """Input outside an operation's mathematical domain (log/sqrt of negatives, x/0)."""


class NumericError(FKGCError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ParseError(FKGCError, ValueError):
    """Malformed line in a data, embedding or log file."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InsufficientDataError(FKGCError, ValueError):
    """Not enough triples or samples to carry out the request."""


class VocabularyError(FKGCError, KeyError):
    """Unknown or missing entity/relation names or indices."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep messages readable
        return str(self.args[0]) if self.args else ""


class CheckpointError(FKGCError):
    """Checkpoint file is corrupt, truncated, or has an incompatible format version."""


class ConfigConflictError(FKGCError, ValueError):
    """Requested configuration contradicts the one stored in a checkpoint."""
