"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`BalredError`, so callers (and the CLI) can separate numerical
failures from configuration mistakes.
"""


class BalredError(Exception):
    """Base class for all package errors."""


class DimensionError(BalredError, ValueError):
    pass


class NumericalError(BalredError, ArithmeticError):
    """Base class for failures of a numerical method or its preconditions."""


class SingularPencilError(NumericalError):
    pass


class NotPSDError(NumericalError):
    pass


class DefinitenessError(NumericalError):
    pass


class StabilityError(NumericalError):
    pass


class ResidualError(NumericalError):
    """A solver returned a result that fails its own residual certificate."""


class ConvergenceError(NumericalError):
    pass


class RankError(NumericalError):
    def __init__(self, message, max_rank=None):
        super().__init__(message)
        self.max_rank = max_rank


class DegenerateSystemError(NumericalError):
    pass


class FormatError(BalredError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(BalredError, ValueError):
    pass


class UnstableModelError(ConfigError, StabilityError):
    """A configuration asks for infinite Gramians of an unstable model."""
