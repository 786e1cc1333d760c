"""Channel-wise convolution operators, cost accounting and desk-scale training."""

from ._accel import backend_name
from .cost import cost_model_total
from .errors import (BuildError, ChannelKitError, DataError, FormatError, NumericalError,
                     ParameterError, ShapeError)
from .zoo import Network, build_channelnet, build_mobilenet, build_model_spec, build_network

__version__ = "0.1.0"

__all__ = [
    "BuildError", "ChannelKitError", "DataError", "FormatError", "Network", "NumericalError",
    "ParameterError", "ShapeError", "backend_name", "build_channelnet", "build_mobilenet",
    "build_model_spec", "build_network", "cost_model_total",
]
