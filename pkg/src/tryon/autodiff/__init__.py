"""Minimal reverse-mode autodiff over float64 numpy arrays."""
from . import ops
from .gradcheck import GradCheckReport, grad_check
from .tensor import (
    NumericOverflowError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    is_grad_enabled,
    no_grad,
    topological_order,
)

__all__ = [
    "GradCheckReport",
    "NumericOverflowError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "grad_check",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "topological_order",
]
