"""Exception types shared across the package."""


class CautiousError(Exception):
    """Base class for package errors."""


class ShapeError(CautiousError, ValueError):
    """Array dimensions of two objects do not agree."""


class ConfigError(CautiousError, ValueError):
    """A configuration or manifest value is out of range."""


class ConvergenceError(CautiousError, RuntimeError):
    """An iterative solver hit its sweep cap before reaching tolerance."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class BeliefExhaustedError(CautiousError, RuntimeError):
    """A without-replacement ensemble queue ran out of members."""

    def __init__(self, requested, available):
        shortfall = requested - available
        super().__init__(
            f"belief exhausted: requested {requested} reward tables with {available} "
            f"left in the queue, {shortfall} remaining unsatisfied"
        )
        self.requested = requested
        self.available = available
        self.shortfall = shortfall
