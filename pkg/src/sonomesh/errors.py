"""Exception hierarchy shared by all stages.

The CLI maps :class:`ConfigError` (and missing files) to exit code 2 and
:class:`NumericError` to exit code 3.
"""


class SonomeshError(Exception):
    pass


class ConfigError(SonomeshError, ValueError):
    pass


class ShapeError(SonomeshError, ValueError):
    pass


class DomainError(SonomeshError, ValueError):
    pass


class NumericError(SonomeshError, ArithmeticError):
    pass


class AlignmentError(NumericError):
    pass


class TrainingError(NumericError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FormatError(SonomeshError, ValueError):
    """Bad magic, truncated payload, or unsupported schema version."""
