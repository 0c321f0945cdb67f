"""Tensor algebra, reverse-mode autodiff, RNG and optimizer."""

from polyadapt.numerics import ops
from polyadapt.numerics.gradcheck import GradCheckReport, grad_check
from polyadapt.numerics.optim import AdamWState, adamw_step
from polyadapt.numerics.rng import Rng, hash64
from polyadapt.numerics.tensor import (DTYPE, Tensor, backward, grad_enabled,
                                       no_grad, set_debug)

__all__ = [
    "ops", "Tensor", "backward", "no_grad", "grad_enabled", "set_debug", "DTYPE",
    "Rng", "hash64", "AdamWState", "adamw_step", "grad_check", "GradCheckReport",
]
