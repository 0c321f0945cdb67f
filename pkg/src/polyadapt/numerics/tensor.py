"""Dense float64 tensors with a reverse-mode tape.

Every op that receives at least one grad-requiring input records a node on
the output tensor: the parent tensors, a backward closure and a monotonically
increasing sequence number. ``backward`` collects the nodes reachable from the
loss and replays them in reverse construction order, so each node is visited
exactly once. Replayed nodes are released, which consumes the tape.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from polyadapt.errors import ContractViolation

DTYPE = np.float64

_seq = itertools.count()
_state = {"grad": True, "debug": False}


@contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled():
    return _state["grad"]


def set_debug(flag: bool):
    """Turn on the finite-value check after every recorded forward op."""
    _state["debug"] = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_spent", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.size == 0:
            raise ContractViolation(f"empty tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._spent = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; kernels live in ops.py
    def __add__(self, other):
        from polyadapt.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from polyadapt.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from polyadapt.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from polyadapt.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from polyadapt.numerics import ops
        return ops.div(self, other)

    def __neg__(self):
        from polyadapt.numerics import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from polyadapt.numerics import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from polyadapt.numerics import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from polyadapt.numerics import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from polyadapt.numerics import ops
        return ops.transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        from polyadapt.numerics import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from polyadapt.numerics import ops
        return ops.mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording a tape node when any parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out._spent = False
    rg = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    if rg:
        out._node = (next(_seq), parents, backward_fn)
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise ContractViolation("non-finite values produced by a forward op")
    return out


def backward(loss: Tensor):
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise ContractViolation("tape already consumed by an earlier backward pass")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise ContractViolation("loss is not on a live tape (nothing requires grad)")

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._node[1] if p.requires_grad and p._node is not None)
    nodes.sort(key=lambda t: t._node[0], reverse=True)

    pending = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = pending.pop(id(t), None)
        _, parents, fn = t._node
        t._node = None
        t._spent = True
        if g is None:
            continue
        grads = fn(g)
        for p, gp in zip(parents, grads):
            if gp is None or not p.requires_grad:
                continue
            if p._node is None:
                p.grad = np.array(gp, dtype=DTYPE, copy=True) if p.grad is None else p.grad + gp
            else:
                key = id(p)
                pending[key] = gp if key not in pending else pending[key] + gp
