"""Exception hierarchy shared across the package."""


class SpikeDiscError(Exception):
    """Base class for all package errors."""


class DimensionError(SpikeDiscError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SpikeDiscError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(SpikeDiscError, ValueError):
    """Invalid or inconsistent configuration."""


class NumericFault(SpikeDiscError, ArithmeticError):
    """NaN/inf or another numerical pathology during a forward or training pass."""


class DegenerateEmbeddingError(NumericFault):
    """A feature vector that must be normalized has (near) zero norm."""

    def __init__(self, message, sample_ids=()):
        super().__init__(message)
        self.sample_ids = list(sample_ids)
