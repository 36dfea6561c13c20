"""Tensor arithmetic, the gradient tape and gradient verification."""

from . import ops
from .gradcheck import CheckReport, finite_diff_check, relative_error
from .nn import Linear, Module, init_rng
from .tensor import (DiffNode, Tensor, as_tensor, get_default_dtype, grad_enabled, no_grad, precision,
                     set_default_dtype)

__all__ = [
    "CheckReport", "DiffNode", "Linear", "Module", "Tensor", "as_tensor", "finite_diff_check",
    "get_default_dtype", "grad_enabled", "init_rng", "no_grad", "ops", "precision", "relative_error",
    "set_default_dtype",
]
