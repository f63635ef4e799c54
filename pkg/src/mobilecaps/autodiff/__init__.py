"""Minimal NHWC tensor library with tape-based reverse-mode differentiation."""

from . import ops
from .gradcheck import GradCheckReport, finite_diff_check
from .tensor import MAX_RANK, Parameter, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "GradCheckReport",
    "MAX_RANK",
    "Parameter",
    "Tensor",
    "backward",
    "finite_diff_check",
    "is_grad_enabled",
    "no_grad",
    "ops",
]
