"""Exception types shared across the package."""


class GridMismatchError(ValueError):
    """Two objects that must share a grid were built on different grids."""


class EigensolverError(RuntimeError):
    def __init__(self, message, iterations=None):
        super().__init__(message if iterations is None else f"{message} (iterations={iterations})")
        self.iterations = iterations


class DivergenceError(RuntimeError):
    """The time integrator produced a non-finite or runaway state."""

    def __init__(self, message, t):
        super().__init__(f"{message} at t={t:.6g}")
        self.t = t


class ConfigError(ValueError):
    pass
