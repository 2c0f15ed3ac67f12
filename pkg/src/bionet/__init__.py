"""Recurrent bi-directional O-shaped encoder-decoder networks in numpy."""

from . import ops
from .errors import (
    BioNetError,
    CheckpointError,
    ConfigError,
    DataError,
    DataIOError,
    DivergenceError,
    FormatError,
    ShapeError,
    StateError,
)
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ops",
    "BioNetError",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DataIOError",
    "DivergenceError",
    "FormatError",
    "ShapeError",
    "StateError",
    "Tape",
    "Tensor",
    "backward",
]
