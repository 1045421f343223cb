"""Exception types shared across the package."""

from __future__ import annotations


class TbvadError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(TbvadError):
    """Bad input data, config, or CLI arguments (exit code 1 territory)."""


class RemoteServiceError(TbvadError):
    """A remote embedding/generation call failed after retries."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class ModelFormatError(TbvadError):
    """Model file is corrupt or has an unsupported format version."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
