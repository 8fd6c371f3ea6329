"""Minimal dense tensors with reverse-mode autodiff and Adam."""

from . import ops
from .core import NonFiniteError, Tensor, finite_checks, is_grad_enabled, make_op, no_grad
from .gradcheck import grad_check
from .init import trunc_normal
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "NonFiniteError",
    "Tensor",
    "adam_step",
    "finite_checks",
    "grad_check",
    "is_grad_enabled",
    "make_op",
    "no_grad",
    "ops",
    "trunc_normal",
]
