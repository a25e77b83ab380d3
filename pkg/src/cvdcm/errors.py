"""Exception types shared across the pipeline."""


class CVDCMError(Exception):
    """Base class for all package errors."""


class ValidationError(CVDCMError, ValueError):
    """Bad input values or inconsistent configuration."""


class SeparationError(CVDCMError):
    """The likelihood has no finite maximum (separated data)."""


class SingularHessianError(CVDCMError):
    """The Hessian cannot be inverted; carries the suspected collinear parameters."""

    def __init__(self, message, parameters=()):
        super().__init__(message)
        self.parameters = tuple(parameters)


class ConvergenceError(CVDCMError):
    """The optimizer hit its iteration limit without meeting the tolerance."""


class InseparableDatasetError(CVDCMError):
    """No image-disjoint train/test split exists for the requested fraction."""


class DataLeakageError(CVDCMError):
    """Train and test partitions share images."""


class NonFiniteError(CVDCMError, FloatingPointError):
    """A NaN or infinity appeared in a computation."""


class WeightFileError(CVDCMError):
    """A weight file is truncated, corrupted, or does not match the config."""
