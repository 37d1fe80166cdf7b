class UsageError(ValueError):
    """Invalid arguments or configuration."""


class NumericalError(ArithmeticError):
    """A computation failed numerically (non-finite value, singular matrix, ...)."""

    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration
