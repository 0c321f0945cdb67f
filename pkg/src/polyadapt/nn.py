"""Parameter containers and the layers shared by encoders, denoiser and adapters."""

from __future__ import annotations

import hashlib
import math

import numpy as np

from polyadapt.numerics import Tensor, ops


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    frozen = False

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self):
        return int(sum(p.data.size for p in self.parameters()))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        self.frozen = False
        return self

    def quantize_(self):
        """Round parameters to float32 precision so checkpoints round-trip exactly."""
        for p in self.parameters():
            p.data[...] = p.data.astype(np.float32).astype(np.float64)
        return self

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr

    def checksum(self):
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


def param(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, std=None, bias=True, trunc=False):
        std = 1.0 / math.sqrt(n_in) if std is None else std
        w = rng.truncated_normal((n_in, n_out), std) if trunc else rng.normal((n_in, n_out), std)
        self.w = param(w)
        self.b = param(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)


class GroupNorm(Module):
    def __init__(self, channels, groups=8):
        self.groups = groups
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))

    def __call__(self, x):
        return ops.group_norm(x, self.groups, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, cin, cout, rng, k=3, std=None):
        std = math.sqrt(1.0 / (k * k * cin)) if std is None else std
        self.w = param(rng.normal((k, k, cin, cout), std))
        self.b = param(np.zeros(cout))

    def __call__(self, x):
        return ops.conv2d(x, self.w, self.b)


def split_heads(x, heads):
    B, L, D = x.shape
    return ops.transpose(ops.reshape(x, (B, L, heads, D // heads)), (0, 2, 1, 3))


def merge_heads(x):
    B, H, L, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


class Attention(Module):
    """Multi-head attention from query features [B, Lq, dq] to context [B, Lk, dkv]."""

    def __init__(self, d_q, d_kv, inner, heads, rng, d_out=None, std=None, trunc=False):
        self.heads = heads
        self.q = Linear(d_q, inner, rng, std=std, trunc=trunc)
        # no key bias: softmax is invariant to it, so it would never get a gradient
        self.k = Linear(d_kv, inner, rng, std=std, trunc=trunc, bias=False)
        self.v = Linear(d_kv, inner, rng, std=std, trunc=trunc)
        self.o = Linear(inner, d_q if d_out is None else d_out, rng, std=std, trunc=trunc)

    def __call__(self, x, ctx=None, key_mask=None):
        ctx = x if ctx is None else ctx
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(ctx), self.heads)
        v = split_heads(self.v(ctx), self.heads)
        mask = None if key_mask is None else np.asarray(key_mask, bool)[:, None, None, :]
        return self.o(merge_heads(ops.scaled_dot_product_attention(q, k, v, mask)))


class FeedForward(Module):
    def __init__(self, d, hidden, rng, std=None, trunc=False):
        self.fc1 = Linear(d, hidden, rng, std=std, trunc=trunc)
        self.fc2 = Linear(hidden, d, rng, std=std, trunc=trunc)

    def __call__(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block."""

    def __init__(self, d, heads, ff, rng):
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, d, d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, ff, rng)

    def __call__(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask=key_mask)
        return x + self.ff(self.ln2(x))
