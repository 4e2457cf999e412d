# src/errors.py


class RoughCalcError(Exception):
    """Base class for every error raised by the library."""


class DomainError(RoughCalcError, ValueError):
    # Negative times, s > t, Hurst outside (0, 1)
    pass


class DimensionError(RoughCalcError, ValueError):
    # Coefficient length mismatch or grid index out of range
    pass


class IllConditionedError(RoughCalcError):
    """Raised when the Gram factorization fails even at the last jitter level."""

    def __init__(self, message, grid=None, model=None):
        super().__init__(message)
        self.grid = grid
        self.model = model


class UnsupportedDimensionError(RoughCalcError):
    pass


class ContractError(RoughCalcError):
    pass


class ConfigError(RoughCalcError):
    pass


class UsageError(RoughCalcError):
    pass


class ReportPathError(RoughCalcError, OSError):
    pass
