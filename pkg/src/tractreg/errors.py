"""Exception hierarchy shared by all modules."""


class TractRegError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(TractRegError, ValueError):
    """Input data violates a documented invariant (NaN coordinates, bad shapes...)."""


class DegenerateStreamlineError(ValidationError):
    """A streamline has zero arc length and cannot be resampled."""


class FormatError(TractRegError, ValueError):
    """A file could not be parsed.

    Parameters
    ----------
    message : str
        What went wrong.
    offset : int, optional
        Byte offset where parsing of a binary file failed.
    line : int, optional
        1-based line number where parsing of a text file failed.
    """

    def __init__(self, message, offset=None, line=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class NumericalError(TractRegError, ArithmeticError):
    """A computation became ill-conditioned or produced non-finite values."""
