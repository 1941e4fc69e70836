"""Tape-based reverse-mode autodiff over float64 numpy arrays."""

from lcnn.autodiff import ops
from lcnn.autodiff.errors import NonFiniteError, ShapeError
from lcnn.autodiff.tape import Tape, Tensor, apply, as_tensor, forward, gradient, hvp

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "apply",
    "as_tensor",
    "forward",
    "gradient",
    "hvp",
    "ops",
]
