"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ConvergenceError(RuntimeError):
    """An iterative method hit its iteration cap."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SolverError(RuntimeError):
    """A direct solve failed (singular system, violated assumptions)."""


class RefinementExhausted(RuntimeError):
    """No stable mesh width exists above the refinement floor."""

    def __init__(self, message, r3=None):
        super().__init__(message)
        self.r3 = r3


class SampleError(RuntimeError):
    """A solver failure while computing one Monte Carlo sample."""

    def __init__(self, message, level=None, index=None):
        super().__init__(message)
        self.level = level
        self.index = index
