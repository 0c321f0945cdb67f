"""Named experiments: each is fully determined by (name, base plan, seeds).

Every recipe writes one run directory per (cell, seed), a combined
``sweep.csv``, a summary ``report.json`` and PNG figures next to them.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from polyadapt.config import Plan, stable_hash
from polyadapt.errors import ContractViolation
from polyadapt.evaluation import figures
from polyadapt.evaluation.metrics import pca_project, silhouette
from polyadapt.evaluation.pipeline import (embedding_cloud, evaluate_run, get_scorer,
                                           teacher_sim, unconditional_sim)
from polyadapt.evaluation.report import write_projection, write_report
from polyadapt.training import (ArtifactStore, alignment_config, dataset_for, run_pipeline,
                                stage_hashes, train_encoder, train_teacher)

log = logging.getLogger(__name__)

SWEEP_FIELDS = ("recipe", "cell", "seed", "lang_group", "sim_mean", "frechet", "retrieval")
LAMBDAS = ("1", "1/4", "1/16", "1/64", "1/1024")
METHOD_CELLS = {"IC": "image_centered", "LC": "language_centered", "none": "none"}
VARIANT_CELLS = ("mlp", "query_transformer", "dual_branch")
DEFAULT_SEEDS = (0, 1, 2)


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


class RecipeRun:
    """Shared plumbing: dataset, scorer, store and the sweep table."""

    def __init__(self, name, base: Plan, out_dir, seeds, store=None):
        if not base.runnable:
            raise ContractViolation("this plan is documentation only (runnable: false)")
        self.name = name
        self.base = base
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.seeds = list(seeds)
        self.store = store or ArtifactStore(self.out / "store")
        self.ds = dataset_for(base)
        self.rows = []
        self._scorer = None
        self._baselines = {}

    @property
    def scorer(self):
        if self._scorer is None:
            self._scorer = get_scorer(self.ds, self.base, self.store)
        return self._scorer

    def run_cell(self, cell, seed, languages, **changes):
        plan = self.base.replace(seed=seed, **{"eval.languages": languages}, **changes)
        run_dir = self.out / "runs" / cell.replace("/", "_") / f"seed{seed}"
        run = run_pipeline(plan, run_dir, self.store, self.ds)
        report = evaluate_run(run, self.ds, plan, self.scorer, store=self.store)
        write_report(report, run_dir)
        figures.report_bars(report, run_dir / "sim_by_language.png", f"{cell}, seed {seed}")
        aggs = {a["group"]: a for a in report.aggregates()}
        for group in ("anchor", "train_mean", "holdout_mean"):
            a = aggs[group]
            if a["n"]:
                self.rows.append((self.name, cell, seed, group, a["sim_mean"], a["frechet"],
                                  a["retrieval"]))
        return run, report, aggs

    def baselines(self, seed):
        """Unconditional and teacher-driven anchor SIM of the shared denoiser."""
        if seed not in self._baselines:
            plan = self.base.replace(seed=seed)
            h = stage_hashes(plan)
            key = stable_hash({"baselines": h["denoiser"], "scorer": h["scorer"], "seed": seed,
                               "sampler": asdict(plan.sampler), "n_scenes": plan.eval.n_scenes})
            cached = self.store.row(key)
            if cached is None:
                run = run_pipeline_stage_b(plan, self.store, self.ds)
                cached = {
                    "unconditional": unconditional_sim(run["denoiser"], self.ds, plan,
                                                       self.scorer),
                    "teacher": teacher_sim(run["teacher"], run["denoiser"], self.ds, plan,
                                           self.scorer),
                }
                self.store.save_row(key, cached)
            self._baselines[seed] = cached
            for cell, v in self._baselines[seed].items():
                self.rows.append((self.name, cell, seed, "anchor", v, None, None))
        return self._baselines[seed]

    def write_sweep(self):
        with open(self.out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_FIELDS)
            for r in self.rows:
                w.writerow([r[0], r[1], r[2], r[3], _fmt(r[4]), _fmt(r[5]), _fmt(r[6])])

    def write_summary(self, summary):
        summary = {"recipe": self.name, "seeds": self.seeds, **summary}
        (self.out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        self.write_sweep()
        return summary


def run_pipeline_stage_b(plan: Plan, store: ArtifactStore, ds):
    """Teacher and denoiser only, through the shared store."""
    from polyadapt.training import train_denoiser

    h = stage_hashes(plan)
    models = {}
    for name, fn in (("teacher", lambda: train_teacher(ds, plan)),
                     ("denoiser", lambda: train_denoiser(ds, plan, models["teacher"]))):
        if store.has(name, h[name]):
            (models[name],), _ = store.load(name, h[name])
        else:
            m, curve = fn()
            store.save(name, h[name], {"model": m}, curve, plan.teacher.seed)
            models[name] = m
    return models


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _cells_summary(per_cell):
    """per_cell[cell][seed] = aggregates -> seeds plus seed means per group."""
    out = {}
    for cell, by_seed in per_cell.items():
        seeds = {str(s): {g: a["sim_mean"] for g, a in aggs.items() if a["n"]}
                 for s, aggs in by_seed.items()}
        groups = sorted({g for v in seeds.values() for g in v})
        out[cell] = {"seeds": seeds,
                     "mean": {g: _mean([v.get(g) for v in seeds.values()]) for g in groups}}
    return out


def table5_alignment_comparison(rr: RecipeRun):
    per_cell = {}
    for cell, method in METHOD_CELLS.items():
        per_cell[cell] = {}
        for seed in rr.seeds:
            _, _, aggs = rr.run_cell(cell, seed, "train", **{"alignment.method": method})
            per_cell[cell][seed] = aggs
    base = {str(s): rr.baselines(s) for s in rr.seeds}
    cells = _cells_summary(per_cell)
    uncond = _mean([b["unconditional"] for b in base.values()])
    m = {c: cells[c]["mean"]["train_mean"] for c in METHOD_CELLS}
    checks = {
        "ic_minus_lc": m["IC"] - m["LC"],
        "lc_minus_none": m["LC"] - m["none"],
        "none_minus_unconditional": m["none"] - uncond,
    }
    figures.grouped_bars(list(METHOD_CELLS),
                         {c: [v["train_mean"] for v in cells[c]["seeds"].values()]
                          for c in METHOD_CELLS},
                         rr.out / "alignment_comparison.png", "non-anchor SIM",
                         "alignment method", baseline=uncond)
    return rr.write_summary({"cells": cells, "baselines": base, "unconditional_mean": uncond,
                             "checks": checks})


def table6_lambda_sweep(rr: RecipeRun):
    per_cell = {}
    for lam in LAMBDAS:
        per_cell[lam] = {}
        for seed in rr.seeds:
            run, _, aggs = rr.run_cell(lam, seed, "train", lambda_fraction=lam)
            per_cell[lam][seed] = aggs
    cells = _cells_summary(per_cell)
    means = [cells[lam]["mean"]["train_mean"] for lam in LAMBDAS]
    sizes = {lam: len(rr.ds.subsample(lam).train_ids) for lam in LAMBDAS}
    checks = {
        "max_increase": max(b - a for a, b in zip(means, means[1:])),
        "drop_to_1_1024": means[0] - means[-1],
        "drop_to_1_64": means[0] - means[3],
    }
    figures.sweep_line(list(LAMBDAS), means, rr.out / "curves.png", title="data fraction sweep")
    return rr.write_summary({"cells": cells, "lambdas": list(LAMBDAS), "n_captions": sizes,
                             "checks": checks})


def parity_check(rr: RecipeRun):
    per_cell = {"IC+query_transformer": {}}
    for seed in rr.seeds:
        _, _, aggs = rr.run_cell("IC+query_transformer", seed, "all",
                                 **{"alignment.method": "image_centered",
                                    "adapter.variant": "query_transformer"})
        per_cell["IC+query_transformer"][seed] = aggs
    cells = _cells_summary(per_cell)
    m = cells["IC+query_transformer"]["mean"]
    checks = {
        "train_rel_gap": abs(m["train_mean"] - m["anchor"]) / abs(m["anchor"]),
        "holdout_rel_gap": abs(m["holdout_mean"] - m["anchor"]) / abs(m["anchor"]),
    }
    return rr.write_summary({"cells": cells, "checks": checks})


def adapter_variant_comparison(rr: RecipeRun):
    per_cell = {}
    budgets = {}
    for variant in VARIANT_CELLS:
        per_cell[variant] = {}
        for seed in rr.seeds:
            run, _, aggs = rr.run_cell(variant, seed, "anchor+train",
                                       **{"alignment.method": "image_centered",
                                          "adapter.variant": variant})
            per_cell[variant][seed] = aggs
            budgets[variant] = run.manifest["budget"]
    cells = _cells_summary(per_cell)
    figures.grouped_bars(list(VARIANT_CELLS),
                         {c: [v["train_mean"] for v in cells[c]["seeds"].values()]
                          for c in VARIANT_CELLS},
                         rr.out / "adapter_variants.png", "non-anchor SIM", "adapter variant")
    return rr.write_summary({"cells": cells, "budgets": budgets})


def appendixB_clustering(rr: RecipeRun, n_prompts=20):
    """Silhouette of pooled embeddings grouped by prompt, per alignment method."""
    results = {}
    for cell, method in METHOD_CELLS.items():
        results[cell] = {}
        for seed in rr.seeds:
            plan = rr.base.replace(seed=seed, **{"alignment.method": method})
            enc = _encoder_only(plan, rr.store, rr.ds)
            points, prompts, langs = embedding_cloud(enc, rr.ds, n_prompts)
            coords, ratios = pca_project(points)
            score = silhouette(points, prompts)
            results[cell][str(seed)] = {"silhouette": score,
                                        "explained_variance": [float(r) for r in ratios]}
            sub = rr.out / "projections" / cell
            sub.mkdir(parents=True, exist_ok=True)
            write_projection(sub / f"projection_seed{seed}.csv", coords, prompts, langs)
            figures.projection_scatter(coords, prompts, sub / f"projection_seed{seed}.png",
                                       f"{cell}, seed {seed}, silhouette {score:.2f}")
    means = {c: _mean([v["silhouette"] for v in results[c].values()]) for c in results}
    checks = {"ic_minus_none": means["IC"] - means["none"]}
    return rr.write_summary({"silhouette": results, "mean_silhouette": means, "checks": checks})


def _encoder_only(plan: Plan, store: ArtifactStore, ds):
    h = stage_hashes(plan)
    if store.has("encoder", h["encoder"]):
        (enc,), _ = store.load("encoder", h["encoder"])
        return enc
    teacher = None
    if plan.alignment.method == "language_centered":
        if store.has("teacher", h["teacher"]):
            (teacher,), _ = store.load("teacher", h["teacher"])
        else:
            teacher, curve = train_teacher(ds, plan)
            store.save("teacher", h["teacher"], {"model": teacher}, curve, plan.teacher.seed)
    enc, curve = train_encoder(ds, plan, teacher)
    store.save("encoder", h["encoder"], {"model": enc}, curve, alignment_config(plan).seed)
    return enc


RECIPES = {
    "table5_alignment_comparison": table5_alignment_comparison,
    "table6_lambda_sweep": table6_lambda_sweep,
    "parity_check": parity_check,
    "adapter_variant_comparison": adapter_variant_comparison,
    "appendixB_clustering": appendixB_clustering,
}


def run_recipe(name, out_dir, base: Plan | None = None, seeds=DEFAULT_SEEDS, store=None):
    if name not in RECIPES:
        raise KeyError(name)
    rr = RecipeRun(name, base or Plan(), out_dir, seeds, store)
    return RECIPES[name](rr)
