"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class DistilEvalError(Exception):
    exit_code = 1


class ConfigError(DistilEvalError, ValueError):
    exit_code = 2


class ShapeError(DistilEvalError, ValueError):
    exit_code = 2


class FormatError(DistilEvalError):
    """Malformed container file. ``offset`` is the byte position of the problem."""

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(DistilEvalError, ArithmeticError):
    exit_code = 4
