"""Exception hierarchy shared across the package."""


class GlucoctxError(Exception):
    """Base class for all package errors."""


class InputShapeError(GlucoctxError, ValueError):
    pass


class NumericInputError(GlucoctxError, ValueError):
    pass


class IllConditionedKernelError(GlucoctxError, ArithmeticError):
    """Raised when a kernel matrix cannot be Cholesky-factorized."""

    def __init__(self, message, view=None):
        super().__init__(message)
        self.view = view


class FitFailureError(GlucoctxError, RuntimeError):
    """Raised when every optimizer restart fails; carries the best model seen."""

    def __init__(self, message, best_model=None):
        super().__init__(message)
        self.best_model = best_model


class DegenerateLabelsError(GlucoctxError, ValueError):
    pass


class MissingValueError(GlucoctxError, ValueError):
    pass


class DataError(GlucoctxError):
    """Base for problems with user-supplied data files."""


class ParseError(DataError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError, ValueError):
    pass


class SplitError(DataError, ValueError):
    pass


class ConfigError(GlucoctxError, ValueError):
    pass
