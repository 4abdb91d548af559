"""Exception types shared across the package."""


class SewkitError(Exception):
    """Base class for all package errors."""


class ShapeError(SewkitError):
    """An operation received tensors whose dimensions do not fit.

    The message names the offending dimension so callers can tell which
    axis disagreed (e.g. ``"Cin"``, ``"T"``).
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class ConfigError(SewkitError):
    """A model/spec configuration is invalid or cannot be resolved."""


class DataError(SewkitError):
    """Input data (audio files, corpora, checkpoints) is malformed.

    Carries an optional ``field`` naming the attribute that failed
    validation (e.g. ``"sample_rate"``).
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class GradientError(SewkitError):
    """Gradient computation or verification failed (non-finite values)."""


class AlignmentError(SewkitError):
    """A CTC label admits no valid alignment for the given frame count.

    The exact loss in this case is +inf; it is reported as an error
    rather than silently returned.
    """


class DivergenceError(SewkitError):
    """Training produced a non-finite loss; the step was aborted."""
