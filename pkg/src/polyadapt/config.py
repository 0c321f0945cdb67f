"""Run plans and their strict JSON form.

A plan is a tree of dataclasses. ``load_plan`` fills defaults, rejects keys the
schema does not know and reports the offending key as a JSON pointer.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

from polyadapt.errors import ConfigError

PLAN_VERSION = 1


@dataclass
class DatasetSection:
    n_train_scenes: int = 2000
    n_eval_scenes: int = 256
    train_langs: int = 8
    holdout_langs: int = 4
    seed: int = 0
    holdout_align_fraction: float = 0.125


@dataclass
class AlignSection:
    """Contrastive or distillation training of a text encoder."""

    steps: int = 1500
    batch: int = 64
    lr: float = 3e-4
    temperature: float = 0.07
    seed: int = 0


@dataclass
class ScorerSection(AlignSection):
    """Evaluation encoder pair; its own seed keeps it distinct from the teacher."""

    seed: int = 1000


@dataclass
class AlignmentSection(AlignSection):
    method: str = "image_centered"
    steps: int = 3000


@dataclass
class DiffusionSection:
    steps: int = 3000
    batch: int = 32
    lr: float = 2e-4
    cond_drop: float = 0.10
    pooled_drop: float = 0.5
    gamma: float = 5.0
    T: int = 100
    seed: int = 11


@dataclass
class AdapterSection:
    variant: str = "query_transformer"
    steps: int = 600
    batch: int = 32
    lr: float = 1e-3
    cond_drop: float = 0.10
    gamma: float = 5.0
    probe_every: int = 200


@dataclass
class SamplerSection:
    guidance: float = 3.0
    chunk: int = 16


@dataclass
class EvalSection:
    n_scenes: int = 64
    languages: str = "all"
    n_retrieval: int = 256


@dataclass
class Plan:
    seed: int = 0
    lambda_fraction: str = "1"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    teacher: AlignSection = field(default_factory=AlignSection)
    scorer: ScorerSection = field(default_factory=ScorerSection)
    alignment: AlignmentSection = field(default_factory=AlignmentSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    runnable: bool = True
    documentation: dict = field(default_factory=dict)

    @property
    def fraction(self) -> Fraction:
        return parse_fraction(self.lambda_fraction, "/lambda_fraction")

    def to_json(self):
        return asdict(self)

    def replace(self, **changes) -> "Plan":
        """Copy with top-level or dotted-path overrides, e.g. ``{"adapter.variant": "mlp"}``."""
        d = self.to_json()
        for key, val in changes.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = val
        return plan_from_json(d)


METHODS = ("image_centered", "language_centered", "none")
VARIANTS = ("mlp", "query_transformer", "dual_branch")
LANGUAGE_SETS = ("all", "train", "anchor+train", "anchor")


def parse_fraction(value, pointer="") -> Fraction:
    try:
        lam = Fraction(str(value))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a fraction: {value!r}", pointer) from exc
    if not 0 < lam <= 1:
        raise ConfigError(f"fraction {value!r} outside (0, 1]", pointer)
    return lam


def _check_type(value, tp, pointer):
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif tp is str:
        ok = isinstance(value, (str, int)) and not isinstance(value, bool)
    elif tp is dict:
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"expected {tp.__name__}, got {type(value).__name__}", pointer)
    return float(value) if tp is float else (str(value) if tp is str else value)


def _build(cls, data, pointer):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object, got {type(data).__name__}", pointer or "/")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"unknown key {key!r}", f"{pointer}/{key}")
    kwargs = {}
    hints = typing.get_type_hints(cls)
    for name, val in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, val, f"{pointer}/{name}")
        else:
            kwargs[name] = _check_type(val, tp, f"{pointer}/{name}")
    return cls(**kwargs)


def _validate(plan: Plan):
    if plan.alignment.method not in METHODS:
        raise ConfigError(f"unknown alignment method {plan.alignment.method!r}",
                          "/alignment/method")
    if plan.adapter.variant not in VARIANTS:
        raise ConfigError(f"unknown adapter variant {plan.adapter.variant!r}", "/adapter/variant")
    if plan.eval.languages not in LANGUAGE_SETS:
        raise ConfigError(f"languages must be one of {LANGUAGE_SETS}", "/eval/languages")
    parse_fraction(plan.lambda_fraction, "/lambda_fraction")
    positive = {
        "/dataset/n_train_scenes": plan.dataset.n_train_scenes,
        "/dataset/n_eval_scenes": plan.dataset.n_eval_scenes,
        "/dataset/train_langs": plan.dataset.train_langs,
        "/dataset/holdout_langs": plan.dataset.holdout_langs,
        "/diffusion/T": plan.diffusion.T - 20,
        "/eval/n_scenes": plan.eval.n_scenes - 1,
        "/sampler/chunk": plan.sampler.chunk,
    }
    for ptr, v in positive.items():
        if v < 1:
            raise ConfigError("value too small", ptr)
    for ptr, section in (("/teacher", plan.teacher), ("/scorer", plan.scorer),
                         ("/alignment", plan.alignment)):
        if section.temperature <= 0:
            raise ConfigError("temperature must be > 0", f"{ptr}/temperature")
        if section.batch < 2:
            raise ConfigError("contrastive batch must be >= 2", f"{ptr}/batch")
    for ptr, v in (("/diffusion/cond_drop", plan.diffusion.cond_drop),
                   ("/diffusion/pooled_drop", plan.diffusion.pooled_drop),
                   ("/adapter/cond_drop", plan.adapter.cond_drop)):
        if not 0 <= v < 1:
            raise ConfigError("probability must lie in [0, 1)", ptr)
    if plan.sampler.guidance < 0:
        raise ConfigError("guidance scale must be >= 0", "/sampler/guidance")
    return plan


def plan_from_json(data) -> Plan:
    return _validate(_build(Plan, data, ""))


def load_plan(path) -> Plan:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", "") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}", "") from exc
    return plan_from_json(data)


def stable_hash(obj) -> str:
    """sha256 of canonical JSON."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def paper_scale_preset() -> dict:
    """Full-scale training settings kept for reference; ``runnable`` is false."""
    return {
        "runnable": False,
        "adapter": {"lr": 1e-5, "batch": 128, "steps": 50000},
        "documentation": {
            "purpose": "reference values for full-size backbones; not executable at toy scale",
            "optimizer": "AdamW, constant learning rate",
            "backbones": {
                "sd15": {"lr": 1e-5, "batch": 128, "steps": 50000},
                "sd21": {"lr": 1e-5, "batch": 128, "steps": 50000},
                "sdxl": {"lr": 1e-6, "batch": 128, "steps": 100000},
                "pixart_alpha": {"lr": 2e-5, "batch": 128, "steps": 118000},
            },
        },
    }


def write_paper_scale(path):
    Path(path).write_text(json.dumps(paper_scale_preset(), indent=2, sort_keys=True) + "\n")
