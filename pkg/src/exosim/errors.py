"""Exception types shared across the package."""


class ExosimError(Exception):
    """Base class for package errors."""


class NonFiniteError(ExosimError):
    """Simulation state diverged (non-finite or out of numeric range)."""


class RankDeficientError(ExosimError):
    """A least-squares regressor is too ill-conditioned to fit."""


class ShapeMismatchError(ExosimError):
    """Array input does not match the expected dimensions."""


class UntrainedModelError(ExosimError):
    """A learned model was used before training / loading weights."""


class NumericalFailureError(ExosimError):
    """An iterative solver failed to converge with diverging residuals."""


class OutOfRangeError(ExosimError):
    """Requested scenario or command exceeds configured physical limits."""


class ConfigError(ExosimError):
    """Invalid or inconsistent configuration input."""
