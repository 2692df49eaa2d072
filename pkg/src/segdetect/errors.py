"""Exception types shared across the package."""


class SegdetectError(Exception):
    """Base class for all package errors."""


class ConfigError(SegdetectError):
    """Invalid configuration or incompatible shapes at setup time."""


class InputError(SegdetectError):
    """Invalid runtime input (bad values, shape mismatch, out-of-range labels)."""


class InternalError(SegdetectError):
    """Inconsistent internal state, e.g. cached activations not matching."""


class TrainingError(SegdetectError):
    """Optimization failure (divergence or non-convergence)."""


class AttackError(SegdetectError):
    """Attack cannot be carried out on the given sample."""
