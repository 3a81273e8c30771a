"""Exception hierarchy shared by every module."""


class BiformerError(Exception):
    """Base class for all library errors."""


class DimensionError(BiformerError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ArgumentError(BiformerError, ValueError):
    """A scalar argument is outside its valid range."""


class ConfigurationError(BiformerError, ValueError):
    """A model or attention configuration violates an invariant."""


class IndexOutOfRange(BiformerError, IndexError):
    """An index tensor addresses a position outside the indexed axis."""


class EvaluationError(BiformerError, ArithmeticError):
    """A forward evaluation produced a non-finite value."""
