"""Shared exception types."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class TraceFormatError(ValidationError):
    """A persisted trace file is malformed."""
