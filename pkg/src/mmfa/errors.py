"""Exception types shared across the package."""


class MmfaError(Exception):
    """Base class for all mmfa-specific errors."""


class DimensionMismatch(MmfaError, ValueError):
    """Shapes of data, model, or spec do not agree."""


class NumericalError(MmfaError, ArithmeticError):
    """A factorization, solve, or Monte Carlo average failed numerically."""


class SchemaError(MmfaError, ValueError):
    """A model or manifest file is corrupt or has an unsupported schema version."""


class UndefinedMetricError(MmfaError, ValueError):
    """A requested metric has no valid value for the given inputs."""


class UndefinedScoreError(MmfaError, ValueError):
    """An instance has no observed feature in any modality."""
