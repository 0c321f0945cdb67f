"""Stage orchestration: align an encoder, pretrain the denoiser, train the adapter.

Every stage is keyed by a hash of the config it depends on. A run directory
holds ``plan.json``, ``manifest.json``, ``ckpt/*.mlck`` and ``curves/*.csv``.
An optional shared ``ArtifactStore`` lets runs that differ only downstream
reuse trained encoders and denoisers.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from polyadapt import __version__
from polyadapt.adapters import Adapter, EncoderOutput, adapt
from polyadapt.checkpoint import load_model, save_checkpoint, sidecar_path
from polyadapt.config import PLAN_VERSION, Plan, stable_hash
from polyadapt.diffusion import (ConditionBundle, Denoiser, DiffusionConfig, NoiseSchedule,
                                 diffusion_loss, mix_condition, pretrain_diffusion,
                                 to_model_space)
from polyadapt.encoders import (AlignmentConfig, ImageEncoder, TextEncoder, anchor_teacher,
                                distill_language_centered, encode_batch,
                                pretrain_image_centered, unaligned_encoder)
from polyadapt.errors import ContractViolation
from polyadapt.numerics import AdamWState, Rng, adamw_step, backward, hash64
from polyadapt.toyworld import ANCHOR, DatasetConfig, DatasetHandle, build_dataset

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


def derived_seed(plan_seed: int, base: int, tag: str) -> int:
    """Per-stage seed for stages that vary with the experiment seed."""
    tag_id = int.from_bytes(tag.encode()[:8].ljust(8, b"\0"), "little")
    return int(hash64(plan_seed, base, tag_id) & 0x7FFFFFFF)


def dataset_for(plan: Plan) -> DatasetHandle:
    return build_dataset(DatasetConfig(**asdict(plan.dataset)))


def alignment_config(plan: Plan) -> AlignmentConfig:
    a = plan.alignment
    return AlignmentConfig(a.method, a.temperature, a.steps, a.batch, a.lr,
                           derived_seed(plan.seed, a.seed, "alignment"))


def _section_config(section, method="image_centered") -> AlignmentConfig:
    return AlignmentConfig(method, section.temperature, section.steps, section.batch,
                           section.lr, section.seed)


def stage_hashes(plan: Plan) -> dict:
    ds = asdict(plan.dataset)
    h = {"teacher": stable_hash({"v": PLAN_VERSION, "dataset": ds,
                                 "teacher": asdict(plan.teacher)}),
         "scorer": stable_hash({"v": PLAN_VERSION, "dataset": ds,
                                "scorer": asdict(plan.scorer)})}
    align = asdict(alignment_config(plan))
    if align["method"] == "none":
        align = {"method": "none", "seed": align["seed"]}
    h["encoder"] = stable_hash({"v": PLAN_VERSION, "dataset": ds, "alignment": align,
                                "teacher": h["teacher"] if align["method"] == "language_centered"
                                else None})
    h["denoiser"] = stable_hash({"v": PLAN_VERSION, "dataset": ds, "teacher": h["teacher"],
                                 "diffusion": asdict(plan.diffusion)})
    h["adapter"] = stable_hash({"v": PLAN_VERSION, "encoder": h["encoder"],
                                "denoiser": h["denoiser"], "adapter": asdict(plan.adapter),
                                "lambda": str(plan.fraction), "seed": plan.seed})
    return h


def write_curve(path, curve):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss"))
        for i, v in enumerate(curve):
            w.writerow((i, repr(float(v))))


def read_curve(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["loss"]) for r in rows]


class ArtifactStore:
    """Directory of trained stage outputs keyed by ``<stage>-<config hash>``."""

    def __init__(self, root):
        self.root = Path(root)

    def entry(self, stage, digest) -> Path:
        return self.root / f"{stage}-{digest[:16]}"

    def has(self, stage, digest, names=("model",)):
        e = self.entry(stage, digest)
        return all((e / f"{n}.mlck").exists() for n in names)

    def load(self, stage, digest, names=("model",)):
        e = self.entry(stage, digest)
        models = [load_model(e / f"{n}.mlck") for n in names]
        curve = read_curve(e / "curve.csv") if (e / "curve.csv").exists() else []
        return models, curve

    def save(self, stage, digest, models: dict, curve, seed, info=None):
        e = self.entry(stage, digest)
        e.mkdir(parents=True, exist_ok=True)
        for name, m in models.items():
            save_checkpoint(e / f"{name}.mlck", m, seed, {"config_hash": digest, "stage": stage})
        write_curve(e / "curve.csv", curve)
        if info is not None:
            (e / "info.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")

    def info(self, stage, digest):
        p = self.entry(stage, digest) / "info.json"
        return json.loads(p.read_text()) if p.exists() else None

    def row(self, digest):
        """A cached evaluation row, or None."""
        p = self.root / "rows" / f"{digest[:16]}.json"
        return json.loads(p.read_text()) if p.exists() else None

    def save_row(self, digest, row: dict):
        p = self.root / "rows" / f"{digest[:16]}.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(row, sort_keys=True) + "\n")


def train_teacher(ds, plan):
    captions = ds.anchor_view("train")
    text, _, curve = anchor_teacher(captions, ds.images, _section_config(plan.teacher))
    return text, curve


def train_scorer(ds, plan):
    """Separately seeded anchor-only contrastive pair used only for scoring."""
    captions = ds.anchor_view("train")
    cfg = _section_config(plan.scorer)
    text, image, curve = anchor_teacher(captions, ds.images, cfg)
    return text, image, curve


def parallel_pairs(ds: DatasetHandle):
    """(student caption, anchor translation) distillation pairs.

    Every (non-anchor, anchor) pair of the parallel view, plus one
    (anchor, anchor) pair per scene. The adapter is later trained on anchor
    captions through this student, so the student has to encode the anchor
    language as the teacher does.
    """
    view = ds.parallel_view()
    pairs = [(other, anchor) for anchor, other in view]
    seen = set()
    for anchor, _ in view:
        if anchor.scene_id not in seen:
            seen.add(anchor.scene_id)
            pairs.append((anchor, anchor))
    return pairs


def train_encoder(ds, plan, teacher=None):
    cfg = alignment_config(plan)
    if cfg.method == "none":
        return unaligned_encoder(ds.vocab.tokens, cfg.seed), []
    if cfg.method == "image_centered":
        text = TextEncoder(ds.vocab.tokens, cfg.seed)
        image = ImageEncoder(cfg.seed + 1)
        text, _, curve = pretrain_image_centered(text, image, ds.alignment_view(), ds.images, cfg)
        return text, curve
    if teacher is None:
        raise ContractViolation("language-centred alignment needs the anchor teacher")
    student = TextEncoder(ds.vocab.tokens, cfg.seed)
    return distill_language_centered(student, teacher, parallel_pairs(ds), cfg)


def train_denoiser(ds, plan, teacher):
    captions = ds.anchor_view("train")
    tok, pooled, _ = encode_batch(teacher, captions)
    images = ds.images[[c.scene_id for c in captions]]
    d = plan.diffusion
    cfg = DiffusionConfig(d.steps, d.batch, d.lr, d.cond_drop, d.pooled_drop, d.gamma, d.T, d.seed)
    return pretrain_diffusion(Denoiser(d.seed), tok, pooled, images, cfg,
                              teacher_frozen=teacher.frozen)


def _frozen_grads_absent(*modules):
    for m in modules:
        for name, p in m.named_parameters():
            if p.requires_grad or (p.grad is not None and np.any(p.grad != 0)):
                return False, name
    return True, None


def train_adapter(adapter: Adapter, encoder: TextEncoder, denoiser: Denoiser, captions,
                  images, cfg, seed: int, T: int = 100):
    """Train only ``adapter`` on anchor captions through the frozen encoder and denoiser.

    Returns the adapter (frozen on return) and a dict with loss curve, frozen
    checksums before and after, and the gradient-isolation probe log.
    """
    if not encoder.frozen or not denoiser.frozen:
        raise ContractViolation("adapter training needs a frozen encoder and a frozen denoiser")
    bad = [c for c in captions if c.lang_id != ANCHOR]
    if bad:
        raise ContractViolation(
            f"adapter training view holds {len(bad)} non-anchor captions (first: {bad[0].lang_id})")
    if adapter.produces_pooled and not denoiser.has_pooled_pathway:
        raise ContractViolation("dual_branch adapter needs a denoiser with a pooled pathway")
    pre = {"encoder": encoder.checksum(), "denoiser": denoiser.checksum()}
    init = adapter.checksum()
    sched = NoiseSchedule(T)
    rng = Rng(seed).child(31)
    opt = AdamWState(lr=cfg.lr)
    params = adapter.parameters()
    curve, probes = [], []
    if cfg.steps > 0:
        tok, pooled, mask = encode_batch(encoder, captions)
        x0 = to_model_space(images[[c.scene_id for c in captions]])
    for step in range(cfg.steps):
        pick = rng.integers(0, len(captions), cfg.batch)
        B = len(pick)
        bundle = adapt(adapter, EncoderOutput(tok[pick], pooled[pick], mask[pick]), denoiser)
        keep = rng.random(B) >= cfg.cond_drop
        null = denoiser.null_bundle(B)
        tokens = mix_condition(keep, bundle.tokens, null.tokens)
        pooled_c = None
        if bundle.pooled is not None:
            pooled_c = mix_condition(keep, bundle.pooled, null.pooled)
        loss = diffusion_loss(denoiser, ConditionBundle(tokens, pooled_c), x0[pick], rng,
                              sched, cfg.gamma)
        backward(loss)
        if step % cfg.probe_every == 0 or step == cfg.steps - 1:
            ok, name = _frozen_grads_absent(encoder, denoiser)
            probes.append({"step": step, "frozen_grads_absent": ok})
            if not ok:
                raise ContractViolation(f"gradient reached frozen parameter {name}")
            if not all(p.grad is not None for p in params):
                raise ContractViolation("an adapter parameter received no gradient")
        adamw_step(params, opt)
        curve.append(float(loss.data))
    post = {"encoder": encoder.checksum(), "denoiser": denoiser.checksum()}
    if pre != post:
        raise ContractViolation("frozen module parameters changed during adapter training")
    adapter.quantize_().freeze()
    return adapter, {
        "curve": curve,
        "frozen_checksums": {k: {"pre": pre[k], "post": post[k]} for k in pre},
        "adapter_checksum": {"init": init, "final": adapter.checksum()},
        "probes": probes,
    }


@dataclass
class RunArtifacts:
    teacher: TextEncoder
    encoder: TextEncoder
    denoiser: Denoiser
    adapter: Adapter
    manifest: dict = field(default_factory=dict)


CKPT_NAMES = ("teacher", "encoder", "denoiser", "adapter")


def _resume_or_none(path: Path, digest: str):
    """Load a run-directory checkpoint if present; refuse on a config-hash mismatch."""
    if not path.exists():
        return None
    side = json.loads(sidecar_path(path).read_text())
    if side.get("config_hash") != digest:
        raise ContractViolation(
            f"{path} was produced by config hash {str(side.get('config_hash'))[:12]} but the "
            f"plan hashes to {digest[:12]}; use a fresh output directory")
    return load_model(path)


def run_pipeline(plan: Plan, out_dir, store: ArtifactStore | None = None,
                 ds: DatasetHandle | None = None) -> RunArtifacts:
    """Run stages A, B and C into ``out_dir``, reusing matching checkpoints."""
    if not plan.runnable:
        raise ContractViolation("this plan is documentation only (runnable: false)")
    out = Path(out_dir)
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    hashes = stage_hashes(plan)
    plan_json = json.dumps(plan.to_json(), indent=2, sort_keys=True) + "\n"
    if (out / "plan.json").exists() and (out / "plan.json").read_text() != plan_json:
        old = json.loads((out / "plan.json").read_text())
        if stable_hash(old) != stable_hash(plan.to_json()):
            log.info("plan differs from %s; stage hashes decide what is reused", out / "plan.json")
    (out / "plan.json").write_text(plan_json)
    ds = ds or dataset_for(plan)
    status, clock, curves, models = {}, {}, {}, {}

    def stage(name, names, train_fn, seed, extra=None):
        t0 = time.perf_counter()
        digest = hashes[name]
        path = out / "ckpt" / f"{name}.mlck"
        found = _resume_or_none(path, digest)
        if found is not None:
            status[name] = "resumed"
            curve_p = out / "curves" / f"{name}.csv"
            curves[name] = read_curve(curve_p) if curve_p.exists() else []
            models[name] = found
        elif store is not None and store.has(name, digest, names):
            (m, *_), curves[name] = store.load(name, digest, names)
            status[name] = "cached"
            models[name] = m
        else:
            result = train_fn()
            m, curves[name] = result[0], list(result[-1])
            status[name] = "trained"
            models[name] = m
            if store is not None:
                store.save(name, digest, {"model": m}, curves[name], seed)
        if status[name] != "resumed":
            save_checkpoint(path, models[name], seed,
                            {"config_hash": digest, "stage": name, **(extra or {})})
            write_curve(out / "curves" / f"{name}.csv", curves[name])
        clock[name] = time.perf_counter() - t0
        log.info("stage %s %s in %.1fs", name, status[name], clock[name])
        return models[name]

    teacher = stage("teacher", ("model",), lambda: train_teacher(ds, plan), plan.teacher.seed)
    a_cfg = alignment_config(plan)
    encoder = stage("encoder", ("model",), lambda: train_encoder(ds, plan, teacher), a_cfg.seed)
    denoiser = stage("denoiser", ("model",), lambda: train_denoiser(ds, plan, teacher),
                     plan.diffusion.seed, {"schedule": NoiseSchedule(plan.diffusion.T).to_json()})
    for name, m in (("teacher", teacher), ("encoder", encoder), ("denoiser", denoiser)):
        if not m.frozen:
            raise ContractViolation(f"{name} checkpoint is not frozen")

    ad_seed = derived_seed(plan.seed, 0, "adapter")
    view = ds.subsample(plan.fraction)
    adapter_path = out / "ckpt" / "adapter.mlck"
    t0 = time.perf_counter()
    found = _resume_or_none(adapter_path, hashes["adapter"])
    prev = _read_manifest(out)
    if found is not None and prev.get("adapter_training"):
        adapter, info = found, prev["adapter_training"]
        status["adapter"] = "resumed"
    elif store is not None and store.has("adapter", hashes["adapter"]) \
            and store.info("adapter", hashes["adapter"]) is not None:
        (adapter,), curve = store.load("adapter", hashes["adapter"])
        info = {**store.info("adapter", hashes["adapter"]), "curve": curve}
        save_checkpoint(adapter_path, adapter, ad_seed,
                        {"config_hash": hashes["adapter"], "stage": "adapter"})
        status["adapter"] = "cached"
    else:
        adapter, info = train_adapter(Adapter(plan.adapter.variant, ad_seed), encoder, denoiser,
                                      view.anchor_view("train"), ds.images, plan.adapter,
                                      ad_seed, plan.diffusion.T)
        save_checkpoint(adapter_path, adapter, ad_seed,
                        {"config_hash": hashes["adapter"], "stage": "adapter"})
        if store is not None:
            store.save("adapter", hashes["adapter"], {"model": adapter}, info["curve"], ad_seed,
                       {k: v for k, v in info.items() if k != "curve"})
        status["adapter"] = "trained"
    curves["adapter"] = info["curve"]
    write_curve(out / "curves" / "adapter.csv", info["curve"])
    clock["adapter"] = time.perf_counter() - t0

    manifest = {
        "format_version": MANIFEST_VERSION,
        "package_version": __version__,
        "config_hash": stable_hash(plan.to_json()),
        "stage_hashes": hashes,
        "seeds": {"plan": plan.seed, "teacher": plan.teacher.seed,
                  "alignment": a_cfg.seed, "diffusion": plan.diffusion.seed,
                  "adapter": ad_seed},
        "lambda_fraction": str(plan.fraction),
        "n_adapter_captions": len(view.train_ids),
        "checksums": {name: models[name].checksum() for name in ("teacher", "encoder", "denoiser")}
        | {"adapter": adapter.checksum()},
        "frozen_checksums": info["frozen_checksums"],
        "isolation_probes": info["probes"],
        "adapter_training": {k: info[k] for k in
                             ("curve", "frozen_checksums", "adapter_checksum", "probes")},
        "stage_status": status,
        "wall_clock_s": {k: round(v, 3) for k, v in clock.items()},
        "budget": {
            "adapter": adapter.param_count(),
            "encoder": encoder.param_count(),
            "denoiser": denoiser.param_count(),
            "ratio": adapter.param_count() / (encoder.param_count() + denoiser.param_count()),
        },
    }
    manifest["adapter_training"].pop("curve")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunArtifacts(teacher, encoder, denoiser, adapter, manifest)


def _read_manifest(out: Path) -> dict:
    p = out / "manifest.json"
    if not p.exists():
        return {}
    m = json.loads(p.read_text())
    info = m.get("adapter_training")
    if info is not None:
        info = dict(info)
        curve_p = out / "curves" / "adapter.csv"
        info["curve"] = read_curve(curve_p) if curve_p.exists() else []
        m["adapter_training"] = info
    return m


def load_run(run_dir) -> RunArtifacts:
    """Load and verify every checkpoint of a finished run."""
    run = Path(run_dir)
    models = {}
    for name in CKPT_NAMES:
        models[name] = load_model(run / "ckpt" / f"{name}.mlck")
    manifest = _read_manifest(run)
    return RunArtifacts(models["teacher"], models["encoder"], models["denoiser"],
                        models["adapter"], manifest)


def copy_run(src, dst):
    shutil.copytree(src, dst, dirs_exist_ok=True)
