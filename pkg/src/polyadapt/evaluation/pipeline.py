"""End-to-end evaluation of a trained run against a separately seeded scorer."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from polyadapt.adapters import EncoderOutput, adapt
from polyadapt.config import Plan
from polyadapt.diffusion import ConditionBundle, NoiseSchedule, sample
from polyadapt.encoders import ImageEncoder, TextEncoder, encode_batch, encode_images
from polyadapt.evaluation.metrics import (SHRINKAGE, frechet_distance, retrieval_accuracy,
                                          sim_score)
from polyadapt.evaluation.report import EvalReport, LangRow
from polyadapt.numerics import hash64
from polyadapt.toyworld import ANCHOR, DatasetHandle

log = logging.getLogger(__name__)

CHAIN_TAG = 0xE7A1


@dataclass
class Scorer:
    """Frozen contrastive text/image pair that never doubles as a model under test."""

    text: TextEncoder
    image: ImageEncoder

    def text_emb(self, captions):
        return encode_batch(self.text, captions)[1]

    def image_emb(self, images):
        return encode_images(self.image, images)

    def score(self, images, anchor_captions):
        """Per-image SIM against the anchor caption of the same scene."""
        return sim_score(self.image_emb(images), self.text_emb(anchor_captions))


def get_scorer(ds: DatasetHandle, plan: Plan, store=None) -> Scorer:
    from polyadapt.training import stage_hashes, train_scorer

    digest = stage_hashes(plan)["scorer"]
    names = ("text", "image")
    if store is not None and store.has("scorer", digest, names):
        (text, image), _ = store.load("scorer", digest, names)
        return Scorer(text, image)
    text, image, curve = train_scorer(ds, plan)
    if store is not None:
        store.save("scorer", digest, {"text": text, "image": image}, curve, plan.scorer.seed)
    return Scorer(text, image)


def eval_languages(ds: DatasetHandle, which: str):
    return {
        "all": [ANCHOR] + ds.train_langs + ds.holdout_langs,
        "train": list(ds.train_langs),
        "anchor+train": [ANCHOR] + ds.train_langs,
        "anchor": [ANCHOR],
    }[which]


def eval_ids(ds: DatasetHandle, plan: Plan):
    return ds.eval_ids[:plan.eval.n_scenes]


def chain_seeds(plan: Plan, ids):
    """One sampling chain per scene, shared by every language and every run of a seed."""
    return [int(hash64(plan.seed, CHAIN_TAG, sid)) for sid in ids]


def generate(encoder, adapter, denoiser, captions, seeds, plan: Plan):
    tok, pooled, mask = encode_batch(encoder, captions)
    bundle = adapt(adapter, EncoderOutput(tok, pooled, mask), denoiser)
    cond = ConditionBundle(bundle.tokens.data,
                           None if bundle.pooled is None else bundle.pooled.data)
    return sample(denoiser, cond, plan.sampler.guidance, seeds,
                  NoiseSchedule(plan.diffusion.T), plan.sampler.chunk)


def row_key(plan: Plan, lang: str) -> str:
    """Everything one evaluation row depends on, hashed."""
    from polyadapt.config import stable_hash
    from polyadapt.training import stage_hashes

    h = stage_hashes(plan)
    ev = {k: v for k, v in asdict(plan.eval).items() if k != "languages"}
    return stable_hash({"adapter": h["adapter"], "scorer": h["scorer"], "seed": plan.seed,
                        "sampler": asdict(plan.sampler), "eval": ev, "lang": lang})


def evaluate_run(run, ds: DatasetHandle, plan: Plan, scorer: Scorer,
                 languages=None, store=None) -> EvalReport:
    """Sample one image per eval caption in each language and score it.

    With a ``store``, rows already computed for the same adapter, scorer and
    evaluation settings are reused.
    """
    ids = eval_ids(ds, plan)
    seeds = chain_seeds(plan, ids)
    anchor_caps = [ds.caption_of(i, ANCHOR) for i in ids]
    anchor_text = scorer.text_emb(anchor_caps)
    gt_feats = scorer.image_emb(ds.images[ids])
    r_ids = ds.eval_ids[:plan.eval.n_retrieval]
    content = [ds.caption_of(i, ANCHOR).text for i in r_ids]
    r_anchor = encode_batch(run.encoder, [ds.caption_of(i, ANCHOR) for i in r_ids])[1]
    rows = []
    for lang in languages or eval_languages(ds, plan.eval.languages):
        key = row_key(plan, lang) if store is not None else None
        cached = store.row(key) if store is not None else None
        if cached is not None:
            rows.append(LangRow(**cached))
            continue
        images = generate(run.encoder, run.adapter, run.denoiser,
                          [ds.caption_of(i, lang) for i in ids], seeds, plan)
        feats = scorer.image_emb(images)
        r_lang = encode_batch(run.encoder, [ds.caption_of(i, lang) for i in r_ids])[1]
        rows.append(LangRow(
            lang_id=lang,
            n=len(ids),
            sim_mean=float(np.mean(sim_score(feats, anchor_text))),
            frechet=frechet_distance(feats, gt_feats),
            retrieval=retrieval_accuracy(r_lang, r_anchor, content),
        ))
        log.info("eval %s sim %.2f", lang, rows[-1].sim_mean)
        if store is not None:
            store.save_row(key, asdict(rows[-1]))
    meta = {
        "config_hash": run.manifest.get("config_hash"),
        "stage_hashes": run.manifest.get("stage_hashes"),
        "seeds": {"plan": plan.seed, "chains": "hash64(seed, 0xE7A1, scene_id)"},
        "n_scenes": len(ids),
        "guidance": plan.sampler.guidance,
        "T": plan.diffusion.T,
        "frechet_shrinkage": SHRINKAGE,
        "alignment": plan.alignment.method,
        "adapter": plan.adapter.variant,
        "lambda_fraction": str(plan.fraction),
    }
    return EvalReport(rows, list(ds.train_langs), list(ds.holdout_langs), meta)


def unconditional_sim(denoiser, ds: DatasetHandle, plan: Plan, scorer: Scorer):
    """Mean SIM of images sampled from the learned null condition."""
    ids = eval_ids(ds, plan)
    null = denoiser.null_bundle(len(ids))
    cond = ConditionBundle(null.tokens.data, None if null.pooled is None else null.pooled.data)
    images = sample(denoiser, cond, 1.0, chain_seeds(plan, ids),
                    NoiseSchedule(plan.diffusion.T), plan.sampler.chunk)
    return float(np.mean(scorer.score(images, [ds.caption_of(i, ANCHOR) for i in ids])))


def teacher_sim(teacher, denoiser, ds: DatasetHandle, plan: Plan, scorer: Scorer):
    """Anchor SIM of the pretrained denoiser driven by its own teacher encoder, no adapter."""
    ids = eval_ids(ds, plan)
    caps = [ds.caption_of(i, ANCHOR) for i in ids]
    tok, pooled, _ = encode_batch(teacher, caps)
    cond = ConditionBundle(denoiser.project_text(tok).data,
                           pooled if denoiser.has_pooled_pathway else None)
    images = sample(denoiser, cond, plan.sampler.guidance, chain_seeds(plan, ids),
                    NoiseSchedule(plan.diffusion.T), plan.sampler.chunk)
    return float(np.mean(scorer.score(images, caps)))


def embedding_cloud(encoder, ds: DatasetHandle, n_prompts=20, languages=None):
    """Pooled embeddings of ``n_prompts`` distinct eval scenes in each language.

    Returns (points [n, 64], prompt ids, language ids).
    """
    languages = languages or ds.train_langs + ds.holdout_langs
    seen, ids = set(), []
    for sid in ds.eval_ids:
        text = ds.caption_of(sid, ANCHOR).text
        if text not in seen:
            seen.add(text)
            ids.append(sid)
        if len(ids) == n_prompts:
            break
    caps, prompt_ids, lang_ids = [], [], []
    for lang in languages:
        for p, sid in enumerate(ids):
            caps.append(ds.caption_of(sid, lang))
            prompt_ids.append(p)
            lang_ids.append(lang)
    return encode_batch(encoder, caps)[1], prompt_ids, lang_ids
