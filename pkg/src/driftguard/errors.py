"""Exception hierarchy shared across the package."""


class DriftguardError(Exception):
    """Base class for all package errors."""


class ConfigError(DriftguardError):
    """Invalid configuration, shape mismatch, or rejected option combination."""


class DegenerateBatchError(DriftguardError):
    """Batch statistics requested on a batch too small to provide them."""


class UndefinedMetricError(DriftguardError):
    """A metric has no defined value on the given inputs (e.g. empty eval set)."""
