"""Pixel-space DDPM with cross-attention text conditioning.

The denoiser predicts the added noise for a [3, 16, 16] image. It reads a
condition bundle: ``tokens`` [B, M, 64] attended by one cross-attention layer
per resolution, and an optional ``pooled`` [B, 64] vector added to the
timestep embedding. Pixels in [0, 1] are mapped to [-1, 1] for diffusion.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from polyadapt.errors import ContractViolation
from polyadapt.nn import Attention, Conv2d, GroupNorm, LayerNorm, Linear, Module, param
from polyadapt.numerics import AdamWState, Rng, Tensor, adamw_step, backward, no_grad, ops

log = logging.getLogger(__name__)


# 0.02 * 1000 / T must stay below 1.
MIN_T = 21


class NoiseSchedule:
    """Linear betas rescaled by 1000/T; index t runs from 1 to T."""

    def __init__(self, T: int = 100):
        if T < MIN_T:
            raise ContractViolation(f"schedule needs T >= {MIN_T} so every beta stays below 1")
        self.T = T
        scale = 1000.0 / T
        self.betas = np.linspace(1e-4 * scale, 0.02 * scale, T)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def _idx(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ContractViolation(f"timestep outside [1, {self.T}]: {t}")
        return t - 1

    def alpha_bar(self, t):
        return self.alpha_bars[self._idx(t)]

    def snr(self, t):
        ab = self.alpha_bar(t)
        return ab / (1.0 - ab)

    def to_json(self):
        return {"T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def q_sample(x0, t, noise, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; t scalar or per-sample."""
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != x0.shape:
        raise ContractViolation(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = np.asarray(sched.alpha_bar(t), dtype=float)
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def min_snr_weight(t, gamma, sched: NoiseSchedule):
    """min(snr, gamma) / snr, the epsilon-prediction form of min-SNR weighting."""
    if gamma <= 0:
        raise ContractViolation("gamma must be > 0")
    s = sched.snr(t)
    return np.minimum(s, gamma) / s


def timestep_embedding(t, dim=64):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=float)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class DenoiserConfig:
    ch1: int = 16
    ch2: int = 32
    t_dim: int = 64
    emb_dim: int = 640
    m_cond: int = 8
    d_cond: int = 64
    max_len: int = 12
    pooled_cond: bool = True
    groups: int = 8


class ResBlock(Module):
    def __init__(self, cin, cout, emb_dim, rng, groups):
        self.norm = GroupNorm(cin, groups)
        self.conv = Conv2d(cin, cout, rng)
        self.emb = Linear(emb_dim, cout, rng, std=0.02)
        self.skip = Conv2d(cin, cout, rng, k=1) if cin != cout else None

    def __call__(self, x, emb):
        h = self.conv(ops.silu(self.norm(x)))
        B, C = h.shape[0], h.shape[3]
        h = h + ops.reshape(self.emb(emb), (B, 1, 1, C))
        return (x if self.skip is None else self.skip(x)) + h


class CrossAttention(Module):
    def __init__(self, channels, d_cond, rng, head_dim=16):
        self.norm = LayerNorm(channels)
        self.attn = Attention(channels, d_cond, channels, channels // head_dim, rng)

    def __call__(self, x, ctx):
        B, H, W, C = x.shape
        flat = ops.reshape(x, (B, H * W, C))
        out = self.attn(self.norm(flat), ctx)
        return x + ops.reshape(out, (B, H, W, C))


@dataclass
class ConditionBundle:
    """Denoiser conditioning: tokens [M, 64] or [B, M, 64], optional pooled."""

    tokens: Tensor
    pooled: Tensor | None = None
    is_null: bool = False


class Denoiser(Module):
    def __init__(self, seed: int, cfg: DenoiserConfig | None = None):
        cfg = cfg or DenoiserConfig()
        rng = Rng(seed)
        self.cfg = cfg
        c1, c2, e, g = cfg.ch1, cfg.ch2, cfg.emb_dim, cfg.groups
        self.time1 = Linear(cfg.t_dim, e, rng)
        self.time2 = Linear(e, e, rng)
        if cfg.pooled_cond:
            self.pool1 = Linear(cfg.d_cond, e, rng)
            self.pool2 = Linear(e, e, rng, std=0.02)
            self.null_pooled = param(rng.normal(cfg.d_cond, 0.02))
        self.text_head = Linear(cfg.max_len * cfg.d_cond, cfg.m_cond * cfg.d_cond, rng)
        self.null_tokens = param(rng.normal((cfg.m_cond, cfg.d_cond), 0.02))
        self.conv_in = Conv2d(3, c1, rng)
        self.res1 = ResBlock(c1, c1, e, rng, g)
        self.xattn1 = CrossAttention(c1, cfg.d_cond, rng)
        self.res2 = ResBlock(c1, c2, e, rng, g)
        self.xattn2 = CrossAttention(c2, cfg.d_cond, rng)
        self.res3 = ResBlock(c2, c2, e, rng, g)
        self.res4 = ResBlock(c2, c1, e, rng, g)
        self.res5 = ResBlock(c1, c1, e, rng, g)
        self.out_norm = GroupNorm(c1, g)
        self.conv_out = Conv2d(c1, 3, rng, std=0.0)

    def config(self):
        return {"kind": "denoiser", **asdict(self.cfg)}

    @property
    def has_pooled_pathway(self):
        return self.cfg.pooled_cond

    def project_text(self, tokens):
        """Encoder tokens [B, 12, 64] (zero padded) -> condition tokens [B, M, 64]."""
        tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        B = tokens.shape[0]
        flat = ops.reshape(tokens, (B, self.cfg.max_len * self.cfg.d_cond))
        return ops.reshape(self.text_head(flat), (B, self.cfg.m_cond, self.cfg.d_cond))

    def null_bundle(self, batch: int) -> ConditionBundle:
        tok = ops.add(ops.reshape(self.null_tokens, (1, self.cfg.m_cond, self.cfg.d_cond)),
                      np.zeros((batch, 1, 1)))
        pooled = None
        if self.cfg.pooled_cond:
            pooled = ops.add(ops.reshape(self.null_pooled, (1, self.cfg.d_cond)),
                             np.zeros((batch, 1)))
        return ConditionBundle(tok, pooled, is_null=True)

    def forward_nhwc(self, x, t, tokens, pooled=None):
        """x [B,16,16,3] noisy image, t [B] ints, tokens [B,M,64] -> noise estimate NHWC."""
        B = x.shape[0]
        emb = self.time2(ops.silu(self.time1(timestep_embedding(t, self.cfg.t_dim))))
        if self.cfg.pooled_cond:
            if pooled is None:
                pooled = ops.add(ops.reshape(self.null_pooled, (1, self.cfg.d_cond)),
                                 np.zeros((B, 1)))
            emb = emb + self.pool2(ops.silu(self.pool1(pooled)))
        elif pooled is not None:
            raise ContractViolation("denoiser has no pooled pathway but a pooled vector was given")
        e = ops.silu(emb)
        h1 = self.xattn1(self.res1(self.conv_in(x), e), tokens)
        h2 = self.xattn2(self.res2(ops.avg_pool2d(h1), e), tokens)
        h4 = self.res4(self.res3(h2, e), e)
        h5 = self.res5(ops.nearest_upsample2d(h4) + h1, e)
        return self.conv_out(ops.silu(self.out_norm(h5)))

    def __call__(self, x_t, t, cond: ConditionBundle):
        """NCHW in, NCHW out."""
        x = np.asarray(x_t, dtype=float).transpose(0, 2, 3, 1)
        tok = cond.tokens
        if tok.ndim == 2:
            tok = ops.reshape(tok, (1,) + tok.shape)
        out = self.forward_nhwc(x, np.asarray(t).reshape(-1), tok, cond.pooled)
        return ops.transpose(out, (0, 3, 1, 2))


def to_model_space(pixels):
    return np.asarray(pixels) * 2.0 - 1.0


def mix_condition(keep, cond, null):
    """Per-sample swap to the null condition: keep[b] selects ``cond``."""
    k = np.asarray(keep, dtype=float).reshape((-1,) + (1,) * (cond.ndim - 1))
    return cond * k + null * (1.0 - k)


def weighted_eps_loss(eps_hat, noise, weights):
    """mean_b w_b * mean((eps_hat_b - noise_b)^2); eps_hat NHWC Tensor."""
    d = eps_hat - noise
    per = ops.mean(d * d, axis=(1, 2, 3))
    return ops.sum(per * np.asarray(weights, dtype=float)) * (1.0 / d.shape[0])


def diffusion_loss(denoiser: Denoiser, cond: ConditionBundle, x0, rng: Rng,
                   sched: NoiseSchedule, gamma: float = 5.0):
    """Min-SNR weighted epsilon MSE on a batch x0 [B,3,16,16] (already in model space)."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 3:
        x0 = x0[None]
    B = x0.shape[0]
    t = rng.integers(1, sched.T + 1, B)
    noise = rng.normal(x0.shape)
    x_t = q_sample(x0, t, noise, sched)
    tok = cond.tokens if cond.tokens.ndim == 3 else ops.reshape(cond.tokens, (1,) + cond.tokens.shape)
    pooled = cond.pooled
    if pooled is not None and pooled.ndim == 1:
        pooled = ops.reshape(pooled, (1,) + pooled.shape)
    eps = denoiser.forward_nhwc(x_t.transpose(0, 2, 3, 1), t, tok, pooled)
    w = min_snr_weight(t, gamma, sched)
    return weighted_eps_loss(eps, noise.transpose(0, 2, 3, 1), w)


@dataclass
class DiffusionConfig:
    steps: int = 8192
    batch: int = 64
    lr: float = 2e-4
    cond_drop: float = 0.10
    pooled_drop: float = 0.5
    gamma: float = 5.0
    T: int = 100
    seed: int = 0


def pretrain_diffusion(denoiser: Denoiser, teacher_tokens, teacher_pooled, images,
                       cfg: DiffusionConfig, teacher_frozen=True):
    """Train the denoiser on anchor captions encoded by the frozen teacher.

    ``teacher_tokens`` [N,12,64], ``teacher_pooled`` [N,64] and ``images``
    [N,3,16,16] are aligned rows of the anchor training view.
    """
    if not teacher_frozen:
        raise ContractViolation("diffusion pretraining needs a frozen teacher encoder")
    sched = NoiseSchedule(cfg.T)
    rng = Rng(cfg.seed).child(23)
    x_all = to_model_space(images)
    params = denoiser.parameters()
    opt = AdamWState(lr=cfg.lr)
    curve = []
    n = len(x_all)
    for step in range(cfg.steps):
        pick = rng.integers(0, n, cfg.batch)
        B = len(pick)
        keep = rng.random(B) >= cfg.cond_drop
        keep_pool = keep & (rng.random(B) >= cfg.pooled_drop)
        null = denoiser.null_bundle(B)
        tokens = mix_condition(keep, denoiser.project_text(teacher_tokens[pick]), null.tokens)
        pooled = None
        if denoiser.has_pooled_pathway:
            pooled = mix_condition(keep_pool, Tensor(teacher_pooled[pick]), null.pooled)
        loss = diffusion_loss(denoiser, ConditionBundle(tokens, pooled), x_all[pick], rng,
                              sched, cfg.gamma)
        backward(loss)
        adamw_step(params, opt)
        curve.append(float(loss.data))
        if step % 500 == 0:
            log.debug("diffusion step %d loss %.4f", step, curve[-1])
    denoiser.quantize_().freeze()
    return denoiser, curve


def sample(denoiser: Denoiser, cond: ConditionBundle, guidance_scale: float, seeds,
           sched: NoiseSchedule, chunk: int = 128):
    """Ancestral DDPM with classifier-free guidance, one chain per seed.

    ``cond.tokens`` is [B, M, 64] with B == len(seeds). Returns pixels
    [B, 3, 16, 16] clamped to [0, 1].
    """
    if guidance_scale < 0:
        raise ContractViolation("guidance scale must be >= 0")
    if not denoiser.frozen:
        raise ContractViolation("sampling needs a frozen denoiser")
    tok = np.asarray(cond.tokens.data if isinstance(cond.tokens, Tensor) else cond.tokens)
    if tok.ndim == 2:
        tok = tok[None]
    pooled = None if cond.pooled is None else np.asarray(
        cond.pooled.data if isinstance(cond.pooled, Tensor) else cond.pooled).reshape(len(tok), -1)
    seeds = list(seeds)
    if len(seeds) != len(tok):
        raise ContractViolation(f"{len(seeds)} seeds for {len(tok)} condition rows")
    out = []
    for s in range(0, len(seeds), chunk):
        sl = slice(s, s + chunk)
        out.append(_sample_chunk(denoiser, tok[sl], None if pooled is None else pooled[sl],
                                 guidance_scale, seeds[sl], sched))
    return np.concatenate(out)


def _sample_chunk(denoiser, tok, pooled, s, seeds, sched):
    B = len(seeds)
    rngs = [Rng(seed) for seed in seeds]
    x = np.stack([r.normal((16, 16, 3)) for r in rngs])
    null = denoiser.null_bundle(B)
    null_tok = null.tokens.data
    null_pool = None if null.pooled is None else null.pooled.data
    if s == 0:
        batches = [(null_tok, null_pool)]
    elif s == 1:
        batches = [(tok, pooled)]
    else:
        ctok = np.concatenate([tok, null_tok])
        cpool = None
        if denoiser.has_pooled_pathway:
            cpool = np.concatenate([pooled if pooled is not None else null_pool, null_pool])
        batches = [(ctok, cpool)]
    ab = sched.alpha_bars
    with no_grad():
        for t in range(sched.T, 0, -1):
            tt = np.full(B * (2 if s not in (0, 1) else 1), t)
            ctok, cpool = batches[0]
            xin = x if s in (0, 1) else np.concatenate([x, x])
            eps = denoiser.forward_nhwc(xin, tt, Tensor(ctok),
                                        None if cpool is None else Tensor(cpool)).data
            if s not in (0, 1):
                eps = guided_eps(eps[:B], eps[B:], s)
            a_t, ab_t = sched.alphas[t - 1], ab[t - 1]
            ab_prev = ab[t - 2] if t > 1 else 1.0
            beta = sched.betas[t - 1]
            x0 = np.clip((x - np.sqrt(1 - ab_t) * eps) / np.sqrt(ab_t), -1.0, 1.0)
            mean = (beta * np.sqrt(ab_prev) / (1 - ab_t)) * x0 + \
                ((1 - ab_prev) * np.sqrt(a_t) / (1 - ab_t)) * x
            if t > 1:
                var = beta * (1 - ab_prev) / (1 - ab_t)
                z = np.stack([r.normal((16, 16, 3)) for r in rngs])
                x = mean + np.sqrt(var) * z
            else:
                x = mean
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0).transpose(0, 3, 1, 2)


def guided_eps(eps_cond, eps_null, s):
    return eps_null + s * (eps_cond - eps_null)
