"""Exception types shared across the package."""


class KnnlmError(Exception):
    """Base class for all package errors."""


class InvalidInputError(KnnlmError, ValueError):
    """An argument violates an operation's preconditions."""


class FormatError(KnnlmError):
    """A binary artifact is malformed or truncated."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(KnnlmError):
    """A pipeline configuration is inconsistent or names missing artifacts."""
