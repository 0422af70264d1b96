"""Emotion-aware prefix conditioning for a two-stage token-based voice converter, at toy scale."""

from . import numerics  # noqa: F401  (sets the float64 default dtype)
from .errors import (
    ConfigError,
    DataError,
    DegenerateMaskError,
    EmoPrefixError,
    FrozenParameterError,
    InputError,
    NumericError,
    PipelineOrderError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateMaskError",
    "EmoPrefixError",
    "FrozenParameterError",
    "InputError",
    "NumericError",
    "PipelineOrderError",
    "StateError",
    "__version__",
]
