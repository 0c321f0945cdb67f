"""Text and image encoders plus the two multilingual alignment procedures.

Image-centred alignment trains a text encoder and an image encoder jointly
with a symmetric InfoNCE loss, so captions in every language are pulled
towards the image they describe. Language-centred alignment distils a frozen
anchor-language teacher into a multilingual student with MSE on parallel text.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from polyadapt.errors import ContractViolation
from polyadapt.nn import LayerNorm, Linear, Module, TransformerBlock, param
from polyadapt.numerics import AdamWState, Rng, Tensor, adamw_step, backward, no_grad, ops
from polyadapt.toyworld import ANCHOR, MAX_LEN, CaptionRecord, Vocabulary

log = logging.getLogger(__name__)

D_MODEL = 64
METHODS = ("image_centered", "language_centered", "none")


@dataclass
class EncoderDims:
    d: int = D_MODEL
    heads: int = 4
    ff: int = 128
    layers: int = 2
    max_len: int = MAX_LEN


class TextEncoder(Module):
    def __init__(self, vocab_tokens, seed: int, dims: EncoderDims | None = None):
        dims = dims or EncoderDims()
        rng = Rng(seed)
        self.dims = dims
        self.vocab = Vocabulary([t for t in vocab_tokens if t != Vocabulary.PAD])
        self.tok = param(rng.normal((len(self.vocab), dims.d), 0.02))
        self.pos = param(rng.normal((dims.max_len, dims.d), 0.02))
        self.blocks = [TransformerBlock(dims.d, dims.heads, dims.ff, rng) for _ in range(dims.layers)]
        self.ln_f = LayerNorm(dims.d)
        self.head = Linear(dims.d, dims.d, rng)

    def config(self):
        return {"kind": "text_encoder", "dims": asdict(self.dims), "vocab": self.vocab.tokens[1:]}

    def token_ids(self, captions):
        ids = np.zeros((len(captions), self.dims.max_len), np.int64)
        for r, cap in enumerate(captions):
            words = cap.words if isinstance(cap, CaptionRecord) else list(cap)
            if not words or words == [""]:
                raise ContractViolation("empty caption")
            if len(words) > self.dims.max_len:
                raise ContractViolation(f"caption longer than {self.dims.max_len} tokens")
            ids[r, :len(words)] = self.vocab.encode(words)
        return ids, ids > 0

    def forward(self, ids, mask):
        B, L = ids.shape
        x = ops.embedding(self.tok, ids) + self.pos
        for blk in self.blocks:
            x = blk(x, key_mask=mask)
        x = self.head(self.ln_f(x))
        tokens = x * mask[..., None].astype(float)
        return tokens, ops.masked_mean(x, mask)

    __call__ = forward


class ImageEncoder(Module):
    """4x4 patches -> 16 tokens -> transformer -> mean-pooled embedding."""

    def __init__(self, seed: int, dims: EncoderDims | None = None, patch=4):
        dims = dims or EncoderDims()
        rng = Rng(seed)
        self.dims = dims
        self.patch = patch
        n_patch = (16 // patch) ** 2
        self.embed = Linear(3 * patch * patch, dims.d, rng)
        self.pos = param(rng.normal((n_patch, dims.d), 0.02))
        self.blocks = [TransformerBlock(dims.d, dims.heads, dims.ff, rng) for _ in range(dims.layers)]
        self.ln_f = LayerNorm(dims.d)
        self.head = Linear(dims.d, dims.d, rng)

    def config(self):
        return {"kind": "image_encoder", "dims": asdict(self.dims), "patch": self.patch}

    def patchify(self, images):
        B = images.shape[0]
        p, g = self.patch, 16 // self.patch
        x = np.asarray(images).reshape(B, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(B, g * g, 3 * p * p)

    def forward(self, images):
        x = self.embed(self.patchify(images)) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.head(ops.mean(self.ln_f(x), axis=1))

    __call__ = forward


def encode_text(model: TextEncoder, caption: CaptionRecord):
    """Encode one caption: {'tokens': [len, 64], 'pooled': [64]} as Tensors."""
    ids, mask = model.token_ids([caption])
    n = int(mask.sum())
    with no_grad():
        toks, pooled = model(ids, mask)
    return {"tokens": Tensor(toks.data[0, :n]), "pooled": Tensor(pooled.data[0])}


def encode_batch(model: TextEncoder, captions, batch=512):
    """Frozen forward over many captions; numpy tokens [N,12,64], pooled [N,64], mask [N,12]."""
    ids, mask = model.token_ids(captions)
    toks, pooled = [], []
    with no_grad():
        for s in range(0, len(captions), batch):
            t, p = model(ids[s:s + batch], mask[s:s + batch])
            toks.append(t.data)
            pooled.append(p.data)
    return np.concatenate(toks), np.concatenate(pooled), mask


def encode_images(model: ImageEncoder, images, batch=512):
    out = []
    with no_grad():
        for s in range(0, len(images), batch):
            out.append(model(images[s:s + batch]).data)
    return np.concatenate(out)


@dataclass
class AlignmentConfig:
    method: str = "image_centered"
    temperature: float = 0.07
    steps: int = 4096
    batch: int = 64
    lr: float = 3e-4
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractViolation(f"unknown alignment method {self.method!r}")
        if self.temperature <= 0:
            raise ContractViolation("temperature must be > 0")


def info_nce(text_emb, image_emb, temperature):
    """Symmetric InfoNCE over in-batch negatives on L2-normalised embeddings."""
    n = text_emb.shape[0]
    if n < 2:
        raise ContractViolation("contrastive loss needs a batch of at least 2")
    t = ops.l2_normalize(text_emb)
    v = ops.l2_normalize(image_emb)
    logits = ops.matmul(t, ops.transpose(v)) * (1.0 / temperature)
    target = np.arange(n)
    return 0.5 * (ops.cross_entropy_from_logits(logits, target)
                  + ops.cross_entropy_from_logits(ops.transpose(logits), target))


def pretrain_image_centered(text: TextEncoder, image: ImageEncoder, captions, images,
                            cfg: AlignmentConfig):
    """Contrastive text-image training; both encoders returned frozen with the loss curve.

    ``captions`` is the caption view; ``images[scene_id]`` is the paired image.
    """
    if cfg.batch < 2:
        raise ContractViolation("contrastive alignment needs batch >= 2")
    ids, mask = text.token_ids(captions)
    scene = np.array([c.scene_id for c in captions])
    params = text.parameters() + image.parameters()
    opt = AdamWState(lr=cfg.lr)
    rng = Rng(cfg.seed).child(7)
    curve = []
    for step in range(cfg.steps):
        pick = rng.integers(0, len(captions), cfg.batch)
        _, pooled = text(ids[pick], mask[pick])
        emb = image(images[scene[pick]])
        loss = info_nce(pooled, emb, cfg.temperature)
        backward(loss)
        adamw_step(params, opt)
        curve.append(float(loss.data))
        if step % 512 == 0:
            log.debug("ic step %d loss %.4f", step, curve[-1])
    text.quantize_().freeze()
    image.quantize_().freeze()
    return text, image, curve


def anchor_teacher(captions, images, cfg: AlignmentConfig, image_seed=None):
    """Image-centred training restricted to anchor captions; returns (text, image, curve)."""
    bad = [c for c in captions if c.lang_id != ANCHOR]
    if bad:
        raise ContractViolation(f"anchor teacher view holds {len(bad)} non-anchor captions")
    vocab = sorted({w for c in captions for w in c.words})
    text = TextEncoder(vocab, cfg.seed)
    image = ImageEncoder(cfg.seed + 1 if image_seed is None else image_seed)
    return pretrain_image_centered(text, image, captions, images, cfg)


def distill_language_centered(student: TextEncoder, teacher: TextEncoder, pairs,
                              cfg: AlignmentConfig):
    """MSE distillation: student(x1) token and pooled outputs match teacher(x2).

    ``pairs`` holds (x1, x2) caption pairs, x2 being the anchor translation.
    """
    if not teacher.frozen:
        raise ContractViolation("language-centred distillation needs a frozen teacher")
    before = teacher.checksum()
    t_tok, t_pool, t_mask = encode_batch(teacher, [p[1] for p in pairs])
    s_ids, s_mask = student.token_ids([p[0] for p in pairs])
    params = student.parameters()
    opt = AdamWState(lr=cfg.lr)
    rng = Rng(cfg.seed).child(11)
    curve = []
    for _ in range(cfg.steps):
        pick = rng.integers(0, len(pairs), cfg.batch)
        toks, pooled = student(s_ids[pick], s_mask[pick])
        m = t_mask[pick][..., None].astype(float)
        diff = toks * m - t_tok[pick]
        tok_loss = ops.sum(diff * diff) * (1.0 / (m.sum() * toks.shape[-1]))
        loss = tok_loss + ops.mse(pooled, Tensor(t_pool[pick]))
        backward(loss)
        adamw_step(params, opt)
        curve.append(float(loss.data))
    if teacher.checksum() != before:
        raise ContractViolation("teacher parameters changed during distillation")
    student.quantize_().freeze()
    return student, curve


def unaligned_encoder(vocab_tokens, seed):
    """Multilingual encoder with no alignment training at all."""
    return TextEncoder(vocab_tokens, seed).quantize_().freeze()
