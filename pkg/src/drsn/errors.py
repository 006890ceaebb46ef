"""Exception hierarchy shared by every module."""


class DrsnError(Exception):
    """Base class for all package errors."""


class DimensionError(DrsnError, ValueError):
    """Tensor shapes or channel counts do not line up."""


class InputError(DrsnError, ValueError):
    """Caller supplied unusable data (empty dataset, non-binary mask, ...)."""


class NumericError(DrsnError, ArithmeticError):
    """A NaN or Inf appeared where a finite value is required."""


class StateError(DrsnError, RuntimeError):
    """An object was used out of order, e.g. backward without forward."""


class FormatError(DrsnError, ValueError):
    """A file on disk (PGM, checkpoint) is malformed."""


class ConfigError(DrsnError, ValueError):
    """A config file has an unknown key or an unparsable value."""
