"""Selective state-space scan kernels and a Mamba-in-ECAPA speaker verification stack on numpy."""

from .blocks import MASV, ModelConfig, StreamState, new_stream, streaming_update
from .errors import (ConfigError, ContractError, DimensionError, LengthError, MasvError, NumericError,
                     ParseError, StateError)

__all__ = [
    "MASV", "ModelConfig", "StreamState", "new_stream", "streaming_update",
    "ConfigError", "ContractError", "DimensionError", "LengthError", "MasvError", "NumericError",
    "ParseError", "StateError",
]
