from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from polyadapt.errors import ContractViolation


@dataclass
class AdamWState:
    """Moments and hyperparameters for decoupled-weight-decay Adam."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, state: AdamWState, names=None):
    """One AdamW update in place; clears grads and bumps ``state.step``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractViolation(
            f"optimizer state tracks {len(state.m)} params, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            label = names[i] if names else (p.name or f"#{i}")
            raise ContractViolation(f"parameter {label} has no grad")
        if state.m[i].shape != p.data.shape:
            raise ContractViolation(
                f"optimizer moment shape {state.m[i].shape} != param {p.data.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t if b1 > 0 else 1.0
    c2 = 1.0 - b2 ** t if b2 > 0 else 1.0
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None
