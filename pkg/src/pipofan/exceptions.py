"""Exception hierarchy shared across the package."""


class PipoFanError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PipoFanError, ValueError):
    """Invalid configuration, manifest or structural setup."""


class ContractError(PipoFanError, ValueError):
    """An operation was called with inputs that violate its preconditions."""


class SamplingError(PipoFanError, RuntimeError):
    """No valid training stack could be drawn from a volume."""


class ECDViolation(PipoFanError, RuntimeError):
    """Branches merged at a feature-graph node have unequal convolutional depth."""

    def __init__(self, node, depths):
        self.node = node
        self.depths = depths
        super().__init__(f"unequal conv depth at merge node {node!r}: {depths}")


class MetricUndefinedError(PipoFanError, ValueError):
    """A metric is undefined for the given inputs (e.g. surface distance of an empty mask)."""


class NonFiniteLossError(PipoFanError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
