class DomainError(ValueError):
    """A parameter or observation lies outside the domain of a function."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-convergence, non-PD matrix, overflow)."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class ValidationError(ValueError):
    """Malformed user input (CSV rows, config files)."""
