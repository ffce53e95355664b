"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DataError(ValueError):
    """Raised when an input record violates a dataset invariant."""

    def __init__(self, message: str, field: str | None = None, index: int | None = None):
        self.field = field
        self.index = index
        super().__init__(message)


class NonPositiveTime(DataError):
    pass


class NegativeCount(DataError):
    """Biomarker count that is negative or not an integer."""


class NonPositiveArea(DataError):
    pass


class LengthMismatch(DataError):
    pass


class MissingColumn(DataError):
    pass


class NoEvents(DataError):
    pass


class NonFiniteLik(ArithmeticError):
    """Likelihood evaluation left the finite range (bad hazard or overflowing eta)."""


class DegenerateWeights(ArithmeticError):
    """All allocation masses for some subject underflowed to zero."""


class Singular(ArithmeticError):
    """Information matrix could not be inverted."""


class TooFewDraws(ValueError):
    pass


class TooFewValues(ValueError):
    pass


class ZeroDensity(ArithmeticError):
    def __init__(self, message: str, min_distance: float):
        self.min_distance = min_distance
        super().__init__(message)


class SamplerError(RuntimeError):
    """Wraps an update failure with the sweep index where it happened."""

    def __init__(self, message: str, sweep: int):
        self.sweep = sweep
        super().__init__(f"sweep {sweep}: {message}")


class NotConverged(ArithmeticError):
    """Newton iterations ran out; ``fit`` holds the best iterate."""

    def __init__(self, message: str, fit=None):
        self.fit = fit
        super().__init__(message)
