"""Minimal differentiable computation layer (numpy, reverse mode)."""

from . import ops
from .gradcheck import CheckReport, finite_difference_check
from .layers import LayerSpec, ParameterSet, apply_layers, forward, init_layers
from .tensor import NonFiniteError, ShapeError, Tape, TapeMismatchError, Tensor, backward, gradient

__all__ = [
    "CheckReport",
    "LayerSpec",
    "NonFiniteError",
    "ParameterSet",
    "ShapeError",
    "Tape",
    "TapeMismatchError",
    "Tensor",
    "apply_layers",
    "backward",
    "finite_difference_check",
    "forward",
    "gradient",
    "init_layers",
    "ops",
]
