"""Exception types raised across the package."""


class FusionCountingError(Exception):
    """Base class for all package errors."""


class ConfigError(FusionCountingError):
    """Invalid configuration value or malformed config file."""


class DataError(FusionCountingError):
    """Invalid sample content (out-of-bounds points, bad shapes)."""


class FormatError(FusionCountingError):
    """Malformed on-disk file (bad magic, truncation, dimension mismatch)."""


class ModelError(FusionCountingError):
    """Shape or state violation inside the network."""


class LossError(FusionCountingError):
    """Loss precondition violation."""


class SchedulerError(FusionCountingError):
    """Loss-weighting or learning-rate schedule misuse."""


class AttackError(FusionCountingError):
    """Adversarial attack failure (non-finite gradients)."""


class MetricError(FusionCountingError):
    """Metric precondition violation."""
