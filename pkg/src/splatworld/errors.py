"""Exception types shared across the package."""


class SplatworldError(Exception):
    """Base class for all package-specific failures."""

    category = "error"


class InvalidParameterError(SplatworldError, ValueError):
    """Non-finite or otherwise malformed numeric input."""

    category = "invalid-parameter"


class DegenerateGaussianError(SplatworldError, ValueError):
    """Covariance stayed singular even after regularization."""

    category = "degenerate-gaussian"


class ContractViolationError(SplatworldError, RuntimeError):
    """An operation was called without the state it requires."""

    category = "contract-violation"


class ManifestError(SplatworldError, ValueError):
    """Scene manifest is missing files or internally inconsistent."""

    category = "manifest"


class CheckpointError(SplatworldError, ValueError):
    """Checkpoint file is truncated, corrupt, or version-incompatible."""

    category = "checkpoint"
