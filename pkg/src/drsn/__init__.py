"""Deformable residual network for SAR target segmentation, written on numpy."""

from drsn.errors import (
    ConfigError,
    DimensionError,
    DrsnError,
    FormatError,
    InputError,
    NumericError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "DrsnError",
    "FormatError",
    "InputError",
    "NumericError",
    "StateError",
]
