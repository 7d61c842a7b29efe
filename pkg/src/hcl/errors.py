"""Exception types shared across the package."""


class HCLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(HCLError):
    """Invalid configuration value, unknown identifier, or malformed config file."""


class ContractViolationError(HCLError):
    """A caller broke a documented precondition."""


class ShapeError(HCLError):
    """Tensor shape does not match what the operation expects."""


class UnsupportedArchitectureError(HCLError):
    """The model does not expose what the operation needs (e.g. running stats)."""


class EmptyBufferError(HCLError):
    """Sampling was requested from a replay buffer with no entries."""


class UndefinedMetricError(HCLError):
    """The metric is not defined for this input (e.g. forgetting with one task)."""


class AggregationError(HCLError):
    """Run records being aggregated are inconsistent with each other."""
