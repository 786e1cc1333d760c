"""Exception hierarchy shared by every channelkit module."""


class ChannelKitError(Exception):
    """Base class for all library errors."""


class ParameterError(ChannelKitError, ValueError):
    """An operator or config received an invalid hyperparameter."""


class ShapeError(ChannelKitError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class BuildError(ChannelKitError, ValueError):
    """A model spec cannot be instantiated or shape-inferred."""


class FormatError(ChannelKitError, ValueError):
    """A file on disk does not follow the expected binary/text layout."""


class DataError(ChannelKitError, ValueError):
    """A file is well formed but carries out-of-range values."""


class NumericalError(ChannelKitError, ArithmeticError):
    """A computation produced a non-finite value."""
