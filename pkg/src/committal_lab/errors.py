"""Exception types shared across the package."""


class LabError(Exception):
    """Base class for every error raised by committal_lab."""


class InvalidParameterError(LabError, ValueError):
    pass


class DimensionError(LabError, ValueError):
    pass


class ZeroGradientError(LabError, ArithmeticError):
    """Normalized update requested at a point where the gradient vanishes."""


class UnsupportedRuleError(LabError, ValueError):
    pass


class NumericalAbort(LabError, ArithmeticError):
    """A simulation produced a non-finite value.

    ``step`` holds the iteration index at which it was detected.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SimplexError(LabError, ArithmeticError):
    pass


class ConfigError(LabError, ValueError):
    pass
