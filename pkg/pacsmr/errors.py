"""Exception hierarchy.

ValidationError maps to CLI exit code 2, NumericalError to exit code 3.
"""


class PacsError(Exception):
    """Root of all pacsmr errors."""


# =============================================================================
# Input validation
# =============================================================================

class ValidationError(PacsError, ValueError):
    """Input data or parameters are invalid."""


class MalformedRowError(ValidationError):
    pass


class NonPositiveSEError(ValidationError):
    pass


class MissingValueError(ValidationError):
    pass


class DimensionMismatchError(ValidationError):
    pass


class DuplicateSnpError(ValidationError):
    pass


# =============================================================================
# Numerical failures
# =============================================================================

class NumericalError(PacsError, ArithmeticError):
    """A linear system or optimization could not be solved."""


class SingularMatrixError(NumericalError):
    def __init__(self, message, smallest_singular_value=None, iteration=None):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value
        self.iteration = iteration


class UnidentifiedDirectionsError(NumericalError):
    def __init__(self, message, directions=None):
        super().__init__(message)
        self.directions = directions


class CrossValidationError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
