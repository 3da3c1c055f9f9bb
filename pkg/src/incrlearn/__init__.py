"""Incremental classifier training with distillation, exemplar replay, and a
Bayesian mutual-distillation objective."""

from . import cli, data, losses, metrics, model, numerics, protocol, replay  # noqa: F401
from .exceptions import (  # noqa: F401
    ConfigError,
    DataError,
    FormatError,
    IncrLearnError,
    NumericError,
    ParameterError,
    ShapeError,
    StateError,
)

__version__ = "0.1.0"
