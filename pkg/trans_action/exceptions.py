class TransActionError(Exception):
    """Base error; `exit_code` is what the CLI returns when it escapes a command."""

    exit_code = 1


class UsageError(TransActionError):
    exit_code = 1


class DataError(TransActionError):
    exit_code = 2


class NumericError(TransActionError):
    exit_code = 3


class ShapeError(ValueError):
    """Raised by tensor ops when operand shapes are incompatible."""
