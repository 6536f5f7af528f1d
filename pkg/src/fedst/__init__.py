"""Personalized federated segmentation of synthetic surgical video with spatio-temporal decoupling."""
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FedSTError,
    NumericalError,
    ProtocolError,
)

__version__ = "0.1.0"
