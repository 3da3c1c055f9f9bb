"""Error hierarchy shared across the package."""


class IncrLearnError(Exception):
    """Base class for all package errors."""


class ShapeError(IncrLearnError):
    """Array dimensions do not match what the operation requires."""


class ParameterError(IncrLearnError):
    """A scalar argument is outside its valid range."""


class NumericError(IncrLearnError):
    """A computation produced or received non-finite / singular values."""


class StateError(IncrLearnError):
    """An operation was called with stale or missing internal state."""


class DataError(IncrLearnError):
    """A dataset violates a structural requirement (empty class, etc.)."""


class FormatError(IncrLearnError):
    """An on-disk artifact could not be parsed."""


class ConfigError(IncrLearnError):
    """An experiment configuration is invalid or unresolvable."""
