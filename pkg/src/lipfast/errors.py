"""errors.py :: Exception types raised by lipfast.

Everything derives from `LipfastError`, so the CLI can turn any of them into
exit code 2 without swallowing unrelated bugs.
"""

from __future__ import annotations


class LipfastError(Exception):
    """Base class for all lipfast errors."""


class DimensionError(LipfastError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ConfigError(LipfastError, ValueError):
    """A configuration record violates one or more invariants."""


class UsageError(LipfastError, ValueError):
    """An operation was called outside of its contract."""


class TooShortError(LipfastError, ValueError):
    """An audio clip is shorter than a single analysis window."""


class ParseError(LipfastError, ValueError):
    """A binary file could not be decoded.

    Args:
        message: Human readable description
        offset: Byte offset at which decoding failed, if known
        field: Name of the field being decoded, if known

    """

    def __init__(
        self,
        message: str,
        *,
        offset: int | None = None,
        field: str | None = None,
    ) -> None:
        """Initialize a ParseError."""
        self.offset = offset
        self.field = field
        details = []
        if field is not None:
            details.append(f"field {field!r}")
        if offset is not None:
            details.append(f"byte offset {offset}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class UnsupportedFormatError(ParseError):
    """A well-formed file uses an encoding lipfast does not read."""


class OracleError(LipfastError, RuntimeError):
    """A brute-force reference computation could not produce a value."""
