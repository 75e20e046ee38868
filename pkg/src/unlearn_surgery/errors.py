"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericalError`` -> 3.
"""


class UnlearnError(Exception):
    """Base class for all package errors."""


class DimensionError(UnlearnError, ValueError):
    """Input shape does not match the model."""


class DataError(UnlearnError):
    """Malformed, missing or inconsistent data / checkpoint files."""


class CheckpointError(DataError):
    """Bad magic, version, CRC or truncated checkpoint."""


class NumericalError(UnlearnError, ArithmeticError):
    """Non-finite loss, gradient or solver result."""


class CgBreakdown(NumericalError):
    """Conjugate gradient hit a non-positive curvature direction.

    Carries the best iterate so far so the caller can inspect it or retry
    with more damping.
    """

    def __init__(self, message, x, residual, iterations):
        super().__init__(message)
        self.x = x
        self.residual = residual
        self.iterations = iterations


class ClassifierGateError(UnlearnError):
    """Feature classifier is below the accuracy bar and cannot be used."""

    def __init__(self, accuracy, required=0.95):
        super().__init__(
            f"(*) erroneous evaluation: classifier accuracy {accuracy:.4f} < {required:.2f}"
        )
        self.accuracy = accuracy
        self.required = required
