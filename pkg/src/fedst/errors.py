"""Exception hierarchy shared by every fedst module."""


class FedSTError(Exception):
    """Base class for all fedst errors."""


class DimensionError(FedSTError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(FedSTError, RuntimeError):
    """A call violated a documented pre-condition (non-scalar loss, missing grad, ...)."""


class NumericalError(FedSTError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(FedSTError, ValueError):
    """Invalid run or model configuration."""


class ProtocolError(FedSTError, RuntimeError):
    """Federation protocol violation: private path on the wire, round skew, bad checksum."""


class DataError(FedSTError, ValueError):
    """Malformed dataset file or invalid labels."""
