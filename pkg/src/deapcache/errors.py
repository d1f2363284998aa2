"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class DeapError(Exception):
    exit_code = 1


class ConfigError(DeapError, ValueError):
    exit_code = 2


class TraceFormatError(DeapError, ValueError):
    exit_code = 4

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyTraceError(DeapError, ValueError):
    exit_code = 4


class ShapeError(DeapError, ValueError):
    exit_code = 4


class NumericError(DeapError, ArithmeticError):
    exit_code = 4


class CheckpointFormatError(DeapError, ValueError):
    exit_code = 4


class LogicError(DeapError, RuntimeError):
    """A policy was asked for something its preconditions rule out."""
