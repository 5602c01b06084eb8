"""Exception hierarchy shared by the library and the command line."""

from __future__ import annotations


class FcnetError(Exception):
    """Base class for every error raised deliberately by this package."""

    exit_code = 1


class InputError(FcnetError, ValueError):
    """Arguments or data violate a documented precondition."""

    exit_code = 3


class FormatError(InputError):
    """A file on disk does not follow the expected layout.

    ``offset`` is the byte (or line) position where parsing stopped, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateSeriesError(InputError):
    """A zero-variance series was passed where a correlation is required."""


class NumericalError(FcnetError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    exit_code = 4


class ConstraintNeverSatisfied(FcnetError):
    """The checkpoint gate rejected every epoch of a fine-tuning run."""

    exit_code = 5
