"""Automatic differentiation: a scalar tape (reference engine) and batched jets."""

from .tape import Tape, Var, cos, exp, forward, gradient, input_hessian_diag, sin, tanh
from .tensor import Tensor, backprop, leaf

__all__ = [
    "Tape",
    "Var",
    "Tensor",
    "backprop",
    "leaf",
    "forward",
    "gradient",
    "input_hessian_diag",
    "tanh",
    "sin",
    "cos",
    "exp",
]
