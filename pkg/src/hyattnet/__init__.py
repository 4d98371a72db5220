"""Hybrid routing-attention landmark detector, built on a minimal taped
autodiff tensor library. See the CLI (`hyattnet --help`) for the harness."""

from .tensor import ConfigError, HyattError, ShapeError, Tape, Tensor, backward, default_dtype

__all__ = [
    "ConfigError",
    "HyattError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "default_dtype",
]

__version__ = "0.1.0"
