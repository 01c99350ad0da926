"""Error types shared across modules."""


class ParameterError(ValueError):
    """Invalid model parameters; ``condition`` names the violated constraint."""

    def __init__(self, condition, message):
        super().__init__(f"{condition}: {message}")
        self.condition = condition


class BudgetExceeded(RuntimeError):
    """A computation would exceed its configured size budget."""


class SeparationError(RuntimeError):
    """Two deep traps are neighbours, so the quasi-annealed step is invalid."""


class ConvergenceError(RuntimeError):
    """An iterative solver did not reach its tolerance."""
