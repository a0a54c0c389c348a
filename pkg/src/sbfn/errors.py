"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SbfnError(Exception):
    exit_code = 1


class ConfigurationError(SbfnError, ValueError):
    exit_code = 2


class ShapeError(SbfnError, ValueError):
    exit_code = 2


class DataFormatError(SbfnError, ValueError):
    """Malformed input file. ``offset`` is a byte offset or ``(row, column)``."""

    exit_code = 3

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class NumericError(SbfnError, ArithmeticError):
    """Non-finite values. ``index`` names the offending layer or predictor."""

    exit_code = 4

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SolverError(NumericError):
    pass
