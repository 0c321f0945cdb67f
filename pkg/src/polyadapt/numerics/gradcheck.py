from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from polyadapt.errors import ContractViolation
from polyadapt.numerics.tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(f, point, h=1e-5, tol=1e-4, extra_params=()):
    """Compare autodiff against central differences at ``point``.

    ``f`` maps a Tensor to a scalar Tensor. ``extra_params`` are further leaf
    tensors (e.g. model weights) whose gradients are checked as well.
    """
    if not 0 < h <= 1e-2:
        raise ContractViolation(f"finite-difference step h={h} outside (0, 1e-2]")
    x = point if isinstance(point, Tensor) else Tensor(point)
    x.requires_grad = True
    leaves = [x, *extra_params]

    def value():
        return float(f(x).data)

    base = value()
    if value() != base:
        raise ContractViolation("function is not deterministic under re-evaluation")

    for p in leaves:
        p.grad = None
    backward(f(x))
    analytic = np.concatenate(
        [(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in leaves])

    numeric = []
    for p in leaves:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            numeric.append((fp - fm) / (2 * h))
    numeric = np.asarray(numeric)
    err = float(_rel_err(analytic, numeric).max())
    return GradCheckReport(err, err < tol, analytic, numeric)
