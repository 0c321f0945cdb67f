"""Lightweight adapters from frozen encoder outputs to the denoiser's condition tokens.

Three variants share one interface. Each takes encoder tokens [B, 12, 64]
(zero padded, with a boolean mask) and produces M condition tokens [B, M, 64].
Only ``dual_branch`` also produces a pooled vector for the denoiser's pooled
pathway.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from polyadapt.diffusion import ConditionBundle
from polyadapt.errors import ConfigError, ContractViolation
from polyadapt.nn import Attention, FeedForward, LayerNorm, Linear, Module, param
from polyadapt.numerics import Rng, Tensor, ops

VARIANTS = ("mlp", "query_transformer", "dual_branch")
INIT_STD = 0.02


@dataclass
class AdapterDims:
    d: int = 64
    m_cond: int = 8
    mlp_hidden: int = 128
    inner: int = 32
    heads: int = 2
    ff: int = 32
    max_len: int = 12


@dataclass
class EncoderOutput:
    """Frozen encoder output: tokens [B, L, 64], pooled [B, 64], mask [B, L]."""

    tokens: np.ndarray
    pooled: np.ndarray
    mask: np.ndarray


class MLPAdapter(Module):
    """Position-wise 64 -> 128 -> 64 MLP on the first M encoder tokens."""

    def __init__(self, rng, dims):
        self.dims = dims
        self.fc1 = Linear(dims.d, dims.mlp_hidden, rng, std=INIT_STD, trunc=True)
        self.fc2 = Linear(dims.mlp_hidden, dims.d, rng, std=INIT_STD, trunc=True)

    def __call__(self, enc: EncoderOutput):
        x = enc.tokens[:, :self.dims.m_cond]
        return self.fc2(ops.gelu(self.fc1(x))), None


class QueryBranch(Module):
    """Learned queries, self-attention, cross-attention to the encoder tokens, feed-forward."""

    def __init__(self, rng, dims):
        self.dims = dims
        self.queries = param(rng.normal((dims.m_cond, dims.d), INIT_STD))
        self.ln1 = LayerNorm(dims.d)
        self.self_attn = Attention(dims.d, dims.d, dims.inner, dims.heads, rng,
                                   std=INIT_STD, trunc=True)
        self.ln2 = LayerNorm(dims.d)
        self.cross_attn = Attention(dims.d, dims.d, dims.inner, dims.heads, rng,
                                    std=INIT_STD, trunc=True)
        self.ln3 = LayerNorm(dims.d)
        self.ff = FeedForward(dims.d, dims.ff, rng, std=INIT_STD, trunc=True)

    def __call__(self, enc: EncoderOutput):
        B = enc.tokens.shape[0]
        q = ops.add(ops.reshape(self.queries, (1,) + self.queries.shape), np.zeros((B, 1, 1)))
        q = q + self.self_attn(self.ln1(q))
        q = q + self.cross_attn(self.ln2(q), enc.tokens, key_mask=enc.mask)
        return q + self.ff(self.ln3(q))


class QueryTransformerAdapter(Module):
    def __init__(self, rng, dims):
        self.dims = dims
        self.branch = QueryBranch(rng, dims)

    def __call__(self, enc):
        return self.branch(enc), None


class AttentionPool(Module):
    """One learned query (in key space) attending over the encoder tokens."""

    def __init__(self, rng, dims):
        self.query = param(rng.normal(dims.inner, INIT_STD))
        self.key = Linear(dims.d, dims.inner, rng, std=INIT_STD, trunc=True, bias=False)
        self.value = Linear(dims.d, dims.d, rng, std=INIT_STD, trunc=True)

    def __call__(self, enc: EncoderOutput):
        B, L, _ = enc.tokens.shape
        q = ops.add(ops.reshape(self.query, (1, 1, 1, -1)), np.zeros((B, 1, 1, 1)))
        k = ops.reshape(self.key(enc.tokens), (B, 1, L, -1))
        v = ops.reshape(self.value(enc.tokens), (B, 1, L, -1))
        mask = np.asarray(enc.mask, bool)[:, None, None, :]
        out = ops.scaled_dot_product_attention(q, k, v, mask)
        return ops.reshape(out, (B, -1))


class DualBranchAdapter(Module):
    """Two query branches fused by a linear map, plus attention pooling."""

    def __init__(self, rng, dims):
        self.dims = dims
        self.branch_a = QueryBranch(rng, dims)
        self.branch_b = QueryBranch(rng, dims)
        self.fuse = Linear(2 * dims.d, dims.d, rng, std=INIT_STD, trunc=True)
        self.pool = AttentionPool(rng, dims)

    def __call__(self, enc):
        both = ops.concat([self.branch_a(enc), self.branch_b(enc)], axis=-1)
        return self.fuse(both), self.pool(enc)


_CLASSES = {"mlp": MLPAdapter, "query_transformer": QueryTransformerAdapter,
            "dual_branch": DualBranchAdapter}


class Adapter(Module):
    """Wrapper holding one variant; the only trainable module in adapter training."""

    def __init__(self, variant: str, seed: int, dims: AdapterDims | None = None):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown adapter variant {variant!r}", "/adapter/variant")
        self.variant = variant
        self.dims = dims or AdapterDims()
        self.net = _CLASSES[variant](Rng(seed), self.dims)

    @property
    def produces_pooled(self):
        return self.variant == "dual_branch"

    def config(self):
        return {"kind": "adapter", "variant": self.variant, "dims": asdict(self.dims)}

    def __call__(self, enc: EncoderOutput):
        return self.net(enc)


def as_encoder_output(encoder_out, max_len=12) -> tuple[EncoderOutput, bool]:
    """Accept an EncoderOutput, or a single caption's {'tokens': [len,64], 'pooled': [64]}.

    Returns the batched output and whether the input was a single caption.
    """
    if isinstance(encoder_out, EncoderOutput):
        return encoder_out, False
    tok = encoder_out["tokens"]
    tok = np.asarray(tok.data if isinstance(tok, Tensor) else tok, dtype=float)
    pooled = encoder_out["pooled"]
    pooled = np.asarray(pooled.data if isinstance(pooled, Tensor) else pooled, dtype=float)
    if tok.ndim != 2:
        raise ContractViolation(f"single-caption tokens must be [len, 64], got {tok.shape}")
    n = tok.shape[0]
    if n > max_len:
        raise ContractViolation(f"encoder tokens longer than {max_len}")
    padded = np.zeros((1, max_len, tok.shape[1]))
    padded[0, :n] = tok
    mask = np.zeros((1, max_len), bool)
    mask[0, :n] = True
    return EncoderOutput(padded, pooled[None], mask), True


def adapt(adapter: Adapter, encoder_out, denoiser=None) -> ConditionBundle:
    """Map encoder outputs into a condition bundle for the denoiser."""
    if denoiser is not None and adapter.produces_pooled and not denoiser.has_pooled_pathway:
        raise ConfigError("dual_branch adapter needs a denoiser with a pooled pathway",
                          "/adapter/variant")
    enc, single = as_encoder_output(encoder_out)
    if enc.tokens.shape[1] > adapter.dims.max_len:
        raise ContractViolation(f"encoder tokens longer than {adapter.dims.max_len}")
    tokens, pooled = adapter(enc)
    if single:
        tokens = ops.reshape(tokens, tokens.shape[1:])
        pooled = None if pooled is None else ops.reshape(pooled, pooled.shape[1:])
    return ConditionBundle(tokens, pooled, is_null=False)


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    frozen: int

    @property
    def total(self):
        return self.trainable + self.frozen


def count_params(model: Module) -> ParamCount:
    trainable = frozen = 0
    for p in model.parameters():
        if p.requires_grad:
            trainable += p.data.size
        else:
            frozen += p.data.size
    return ParamCount(int(trainable), int(frozen))


def closed_form_count(variant: str, dims: AdapterDims | None = None) -> int:
    """Parameter count from layer arithmetic alone."""
    d = dims or AdapterDims()

    def linear(i, o, bias=True):
        return i * o + (o if bias else 0)

    attn = 2 * linear(d.d, d.inner) + linear(d.d, d.inner, bias=False) + linear(d.inner, d.d)
    branch = (d.m_cond * d.d + 3 * 2 * d.d + 2 * attn
              + linear(d.d, d.ff) + linear(d.ff, d.d))
    if variant == "mlp":
        return linear(d.d, d.mlp_hidden) + linear(d.mlp_hidden, d.d)
    if variant == "query_transformer":
        return branch
    if variant == "dual_branch":
        pool = d.inner + linear(d.d, d.inner, bias=False) + linear(d.d, d.d)
        return 2 * branch + linear(2 * d.d, d.d) + pool
    raise ConfigError(f"unknown adapter variant {variant!r}", "/adapter/variant")


def budget_ratio(adapter: Adapter, encoder: Module, denoiser: Module) -> float:
    return adapter.param_count() / (encoder.param_count() + denoiser.param_count())
