"""Forward kernels and their backward rules.

Images inside the network use NHWC layout so that convolutions reduce to a
single 2-D matmul over im2col patches. Elementwise ops broadcast like numpy;
gradients are summed back onto the operand shape.
"""

from __future__ import annotations

import math

import numpy as np

from polyadapt.errors import ContractViolation
from polyadapt.numerics.tensor import DTYPE, Tensor, make

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(
            f"{opname}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _t(a), _t(b)
    _broadcast_check(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _t(a), _t(b)
    _broadcast_check(a, b, "sub")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _t(a), _t(b)
    _broadcast_check(a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _t(a), _t(b)
    _broadcast_check(a, b, "div")

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.shape)
              if b.requires_grad else None)
        return ga, gb
    return make(a.data / b.data, (a, b), bw)


def exp(x):
    x = _t(x)
    out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,))


def log(x):
    x = _t(x)
    return make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = _t(x)
    out = np.sqrt(x.data)
    return make(out, (x,), lambda g: (0.5 * g / out,))


def power(x, p: float):
    x = _t(x)
    return make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def absolute(x):
    # subgradient +1 at the kink, so finite differences disagree there
    x = _t(x)
    return make(np.abs(x.data), (x,), lambda g: (g * np.where(x.data >= 0, 1.0, -1.0),))


def tanh(x):
    x = _t(x)
    out = np.tanh(x.data)
    return make(out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x):
    """Tanh approximation of GELU."""
    x = _t(x)
    x2 = x.data * x.data
    th = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))
    out = 0.5 * x.data * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du),)
    return make(out, (x,), bw)


def silu(x):
    x = _t(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return make(out, (x,), lambda g: (g * sig * (1.0 + x.data * (1.0 - sig)),))


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = _t(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)
    return make(np.asarray(out, dtype=DTYPE), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = _t(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    x = _t(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = _t(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)
    return make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx):
    x = _t(x)

    def bw(g):
        full = np.zeros_like(x.data)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)
    return make(x.data[idx], (x,), bw)


def _fancy(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(xs, axis=0):
    xs = [_t(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
            raise ContractViolation(f"concat: shape mismatch {ref} vs {x.shape}")
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(p if x.requires_grad else None
                     for p, x in zip(np.split(g, sizes, axis=axis), xs))
    return make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def stack(xs, axis=0):
    xs = [_t(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _t(a), _t(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return make(out, (a, b), bw)


def linear(x, w, b=None):
    """x[..., i] @ w[i, o] + b[o], fused."""
    x, w = _t(x), _t(w)
    if x.shape[-1] != w.shape[0]:
        raise ContractViolation(f"linear: shape mismatch {x.shape} vs {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(lead + (w.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)
    return make(out, parents, bw)


# ---------------------------------------------------------------- normalisation

def softmax(x, axis=-1):
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make(out, (x,), bw)


def log_softmax(x, axis=-1):
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return make(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def _norm_backward(g, xhat, inv, axes):
    n = np.prod([xhat.shape[a] for a in axes])
    gm = g.sum(axis=axes, keepdims=True) / n
    gxm = (g * xhat).sum(axis=axes, keepdims=True) / n
    return inv * (g - gm - xhat * gxm)


def layer_norm(x, gamma=None, beta=None, eps=LN_EPS):
    x = _t(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat if gamma is None else xhat * gamma.data + beta.data
    parents = (x,) if gamma is None else (x, gamma, beta)

    def bw(g):
        gh = g if gamma is None else g * gamma.data
        gx = _norm_backward(gh, xhat, inv, (-1,)) if x.requires_grad else None
        if gamma is None:
            return (gx,)
        red = tuple(range(g.ndim - 1))
        return (gx,
                (g * xhat).sum(axis=red) if gamma.requires_grad else None,
                g.sum(axis=red) if beta.requires_grad else None)
    return make(out, parents, bw)


def group_norm(x, groups, gamma, beta, eps=LN_EPS):
    """Group norm over an NHWC tensor.

    Statistics come from per-channel sums over the spatial axes, which keeps
    every reduction contiguous.
    """
    x = _t(x)
    B, H, W, C = x.shape
    if C % groups:
        raise ContractViolation(f"group_norm: {C} channels not divisible by {groups} groups")
    cg = C // groups
    n = H * W * cg
    xf = x.data.reshape(B, H * W, C)

    def group_mean(per_channel):
        m = per_channel.reshape(B, groups, cg).sum(axis=2) / n
        return np.repeat(m, cg, axis=1)[:, None, :]

    mu = group_mean(xf.sum(axis=1))
    xc = xf - mu
    inv = 1.0 / np.sqrt(group_mean((xc * xc).sum(axis=1)) + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).reshape(B, H, W, C)

    def bw(g):
        gf = g.reshape(B, H * W, C)
        gx = None
        if x.requires_grad:
            gh = gf * gamma.data
            gm = group_mean(gh.sum(axis=1))
            gxm = group_mean((gh * xhat).sum(axis=1))
            gx = (inv * (gh - gm - xhat * gxm)).reshape(x.shape)
        return (gx,
                (gf * xhat).sum(axis=(0, 1)) if gamma.requires_grad else None,
                gf.sum(axis=(0, 1)) if beta.requires_grad else None)
    return make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- lookup / attention

def embedding(weight, ids):
    weight = _t(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractViolation(f"embedding: id out of range for table {weight.shape}")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)
    return make(weight.data[ids], (weight,), bw)


def scaled_dot_product_attention(q, k, v, key_mask=None):
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``key_mask`` is a boolean array broadcastable to [..., Lq, Lk]; False keys
    are excluded.
    """
    q, k, v = _t(q), _t(k), _t(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ContractViolation(
            f"attention: shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    if key_mask is not None:
        s = np.where(key_mask, s, -1e30)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)

    def bw(g):
        gv = _unbroadcast(np.matmul(np.swapaxes(p, -1, -2), g), v.shape) if v.requires_grad else None
        gq = gk = None
        if q.requires_grad or k.requires_grad:
            gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
            if q.requires_grad:
                gq = _unbroadcast(np.matmul(gs, k.data), q.shape)
            if k.requires_grad:
                gk = _unbroadcast(np.matmul(np.swapaxes(gs, -1, -2), q.data), k.shape)
        return gq, gk, gv
    return make(out, (q, k, v), bw)


# ---------------------------------------------------------------- convolution

def _shifts(H, W):
    """(kernel index, padded-input window) pairs of a 3x3 'same' convolution."""
    return [((i, j), (slice(None), slice(i, i + H), slice(j, j + W)))
            for i in range(3) for j in range(3)]


def conv2d(x, w, b=None):
    """Stride-1 'same' convolution, NHWC input, kernel [k, k, Cin, Cout], k in {1, 3}.

    The 3x3 case accumulates nine shifted matmuls instead of building an
    im2col buffer; it is the same sum in a cache-friendlier order.
    """
    x, w = _t(x), _t(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != x.shape[3] or w.shape[0] not in (1, 3):
        raise ContractViolation(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    B, H, W, C = x.shape
    k, cout = w.shape[0], w.shape[3]
    if k == 1:
        out = x.data.reshape(-1, C) @ w.data[0, 0]
        out = out.reshape(B, H, W, cout)
    else:
        xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
        out = np.zeros((B, H, W, cout))
        for (i, j), win in _shifts(H, W):
            out += xp[win] @ w.data[i, j]
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = None
        if k == 1:
            g2 = g.reshape(-1, cout)
            if x.requires_grad:
                gx = (g2 @ w.data[0, 0].T).reshape(x.shape)
            if w.requires_grad:
                gw = (x.data.reshape(-1, C).T @ g2).reshape(w.shape)
        else:
            if x.requires_grad:
                gp = np.zeros((B, H + 2, W + 2, C))
                for (i, j), win in _shifts(H, W):
                    gp[win] += g @ w.data[i, j].T
                gx = gp[:, 1:-1, 1:-1, :]
            if w.requires_grad:
                g2 = g.reshape(-1, cout)
                gw = np.empty(w.shape)
                for (i, j), win in _shifts(H, W):
                    gw[i, j] = xp[win].reshape(-1, C).T @ g2
        if b is None:
            return gx, gw
        gb = g.reshape(-1, cout).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb
    return make(out, parents, bw)


def avg_pool2d(x):
    """2x2 average pooling, NHWC."""
    x = _t(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ContractViolation(f"avg_pool2d: odd spatial shape {x.shape}")
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def bw(g):
        g = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
        return (g * 0.25,)
    return make(out, (x,), bw)


def nearest_upsample2d(x):
    """2x nearest-neighbour upsampling, NHWC."""
    x = _t(x)
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        return (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),)
    return make(out, (x,), bw)


# ---------------------------------------------------------------- losses / similarity

def mse(a, b):
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ContractViolation(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size

    def bw(g):
        gd = g * 2.0 * d / n
        return (gd if a.requires_grad else None, -gd if b.requires_grad else None)
    return make(np.asarray(np.mean(d * d)), (a, b), bw)


def l2_normalize(x, axis=-1, eps=1e-12):
    x = _t(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    nrm = np.maximum(norm, eps)
    out = x.data / nrm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / nrm,)
    return make(out, (x,), bw)


def cosine_similarity(a, b, axis=-1):
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ContractViolation(f"cosine_similarity: shape mismatch {a.shape} vs {b.shape}")
    return sum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


def cross_entropy_from_logits(logits, targets):
    """Mean cross-entropy over rows of ``logits`` [N, C] with integer targets [N]."""
    logits = _t(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ContractViolation(
            f"cross_entropy: shape mismatch {logits.shape} vs {targets.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    ssum = e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = np.mean(np.log(ssum[:, 0]) - z[rows, targets])

    def bw(g):
        p = e / ssum
        p[rows, targets] -= 1.0
        return (g * p / n,)
    return make(np.asarray(loss), (logits,), bw)


def masked_mean(x, mask):
    """Mean over axis -2 of x[..., L, D] using a boolean mask[..., L]."""
    x = _t(x)
    m = np.asarray(mask, dtype=DTYPE)[..., None]
    cnt = np.maximum(m.sum(axis=-2, keepdims=True), 1.0)
    w = m / cnt
    return make((x.data * w).sum(axis=-2), (x,),
                lambda g: (np.expand_dims(g, -2) * w,))

