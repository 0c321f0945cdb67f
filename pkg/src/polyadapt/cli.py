"""Command-line entry point.

Every command prints one JSON status line on stdout. Exit codes: 0 success,
1 contract violation (including checkpoint errors), 2 bad usage or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from polyadapt import __version__
from polyadapt.config import Plan, load_plan
from polyadapt.errors import ConfigError, ContractViolation

log = logging.getLogger("polyadapt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="experiment seed")
    p.add_argument("--config", default=d, help="JSON plan file")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="only print the status line")


def build_parser():
    parser = _Parser(prog="polyadapt", description="Multilingual adapter toy pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="dataset commands")
    ds_sub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ds_sub.add_parser("build", parents=[common], help="materialize the dataset directory")

    sub.add_parser("align", parents=[common], help="train the teacher and the aligned encoder")
    sub.add_parser("pretrain-diffusion", parents=[common],
                   help="train the teacher and the denoiser")
    sub.add_parser("train-adapter", parents=[common], help="run all stages into --out")

    sp = sub.add_parser("sample", parents=[common], help="sample images from a run")
    sp.add_argument("--run", required=True, help="run directory")
    sp.add_argument("--lang", default="anchor")
    sp.add_argument("--n", type=int, default=8, help="number of eval captions")

    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a run")
    ev.add_argument("--run", required=True, help="run directory")

    rc = sub.add_parser("recipe", help="named experiments")
    rc_sub = rc.add_subparsers(dest="action", required=True, parser_class=_Parser)
    rr = rc_sub.add_parser("run", parents=[common], help="run a recipe")
    rr.add_argument("name")
    rr.add_argument("--seeds", help="comma-separated seeds (default 0,1,2 or --seed)")
    rr.add_argument("--store", help="shared stage-artifact directory")

    rp = sub.add_parser("report", help="report tools")
    rp_sub = rp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    rd = rp_sub.add_parser("diff", parents=[common], help="compare two report.json files")
    rd.add_argument("a")
    rd.add_argument("b")
    return parser


def _plan(args) -> Plan:
    plan = load_plan(args.config) if args.config else Plan()
    if args.seed is not None:
        plan = plan.replace(seed=args.seed)
    return plan


def _out(args, default):
    return Path(args.out or default)


def _require_runnable(plan):
    if not plan.runnable:
        raise ConfigError("plan is documentation only (runnable: false)", "/runnable")


def cmd_dataset_build(args):
    from polyadapt.toyworld import write_dataset
    from polyadapt.training import dataset_for

    plan = _plan(args)
    out = _out(args, "dataset")
    ds = dataset_for(plan)
    write_dataset(ds, out)
    return {"out": str(out), "scenes": len(ds.scenes), "languages": len(ds.all_langs)}


def _stage_models(args, names):
    from polyadapt.training import (ArtifactStore, dataset_for, stage_hashes, train_denoiser,
                                    train_encoder, train_teacher, write_curve)
    from polyadapt.checkpoint import save_checkpoint

    plan = _plan(args)
    _require_runnable(plan)
    out = _out(args, "run")
    store = ArtifactStore(out / "store")
    ds = dataset_for(plan)
    h = stage_hashes(plan)
    models = {}
    fns = {
        "teacher": lambda: train_teacher(ds, plan),
        "encoder": lambda: train_encoder(ds, plan, models.get("teacher")),
        "denoiser": lambda: train_denoiser(ds, plan, models["teacher"]),
    }
    for name in names:
        if store.has(name, h[name]):
            (m,), curve = store.load(name, h[name])
        else:
            m, curve = fns[name]()
            store.save(name, h[name], {"model": m}, curve, plan.seed)
        models[name] = m
        save_checkpoint(out / "ckpt" / f"{name}.mlck", m, plan.seed,
                        {"config_hash": h[name], "stage": name})
        write_curve(out / "curves" / f"{name}.csv", curve)
    return {"out": str(out), "checksums": {n: m.checksum() for n, m in models.items()}}


def cmd_align(args):
    return _stage_models(args, ("teacher", "encoder"))


def cmd_pretrain_diffusion(args):
    return _stage_models(args, ("teacher", "denoiser"))


def cmd_train_adapter(args):
    from polyadapt.evaluation import figures
    from polyadapt.training import ArtifactStore, run_pipeline

    plan = _plan(args)
    _require_runnable(plan)
    out = _out(args, "run")
    run = run_pipeline(plan, out, ArtifactStore(out / "store"))
    curves = {}
    for name in ("teacher", "encoder", "denoiser", "adapter"):
        p = out / "curves" / f"{name}.csv"
        if p.exists():
            from polyadapt.training import read_curve
            curves[name] = read_curve(p)
    figures.loss_curves(curves, out / "curves" / "losses.png")
    return {"out": str(out), "config_hash": run.manifest["config_hash"],
            "budget_ratio": run.manifest["budget"]["ratio"]}


def _run_plan(run_dir: Path, args) -> Plan:
    from polyadapt.config import plan_from_json

    p = run_dir / "plan.json"
    if not p.exists():
        raise ContractViolation(f"run directory has no plan.json: {p}")
    plan = plan_from_json(json.loads(p.read_text()))
    if args.seed is not None:
        plan = plan.replace(seed=args.seed)
    return plan


def cmd_sample(args):
    from polyadapt.evaluation.pipeline import chain_seeds, generate
    from polyadapt.toyworld import write_images
    from polyadapt.training import dataset_for, load_run

    run_dir = Path(args.run)
    run = load_run(run_dir)
    plan = _run_plan(run_dir, args)
    ds = dataset_for(plan)
    if args.lang not in ds.all_langs:
        raise ConfigError(f"unknown language {args.lang!r}", "/lang")
    ids = ds.eval_ids[:args.n]
    images = generate(run.encoder, run.adapter, run.denoiser,
                      [ds.caption_of(i, args.lang) for i in ids], chain_seeds(plan, ids), plan)
    out = _out(args, run_dir / "samples")
    out.mkdir(parents=True, exist_ok=True)
    write_images(out / f"samples_{args.lang}.bin", images)
    _image_grid(images, out / f"samples_{args.lang}.png")
    return {"out": str(out), "n": len(ids), "lang": args.lang}


def _image_grid(images, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(images)
    cols = min(n, 8)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(cols, rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for img, ax in zip(images, axes.ravel()):
        ax.imshow(np.transpose(img, (1, 2, 0)), interpolation="nearest")
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_evaluate(args):
    from polyadapt.evaluation import figures
    from polyadapt.evaluation.pipeline import evaluate_run, get_scorer
    from polyadapt.evaluation.report import write_report
    from polyadapt.training import ArtifactStore, dataset_for, load_run

    run_dir = Path(args.run)
    run = load_run(run_dir)
    plan = _run_plan(run_dir, args)
    ds = dataset_for(plan)
    scorer = get_scorer(ds, plan, ArtifactStore(run_dir / "store"))
    report = evaluate_run(run, ds, plan, scorer)
    out = _out(args, run_dir)
    write_report(report, out)
    figures.report_bars(report, out / "sim_by_language.png")
    return {"out": str(out), "aggregates": report.aggregates()}


def cmd_recipe_run(args):
    from polyadapt.recipes import DEFAULT_SEEDS, RECIPES, run_recipe
    from polyadapt.training import ArtifactStore

    if args.name not in RECIPES:
        raise UsageError(f"unknown recipe {args.name!r}; choose from {sorted(RECIPES)}")
    plan = load_plan(args.config) if args.config else Plan()
    _require_runnable(plan)
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",")]
        except ValueError as exc:
            raise UsageError(f"bad --seeds value {args.seeds!r}") from exc
    elif args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = list(DEFAULT_SEEDS)
    out = _out(args, Path("recipes") / args.name)
    store = ArtifactStore(args.store) if args.store else None
    summary = run_recipe(args.name, out, plan, seeds, store)
    return {"out": str(out), "recipe": args.name, "seeds": seeds,
            "checks": summary.get("checks", {})}


def cmd_report_diff(args):
    from polyadapt.evaluation.report import diff_reports

    docs = []
    for p in (args.a, args.b):
        p = Path(p)
        if p.is_dir():
            p = p / "report.json"
        if not p.exists():
            raise ContractViolation(f"report not found: {p}")
        docs.append(json.loads(p.read_text()))
    diffs = diff_reports(*docs)
    for ptr, left, right in diffs:
        print(f"{ptr}\t{json.dumps(left)}\t{json.dumps(right)}", file=sys.stderr)
    return {"differences": len(diffs)}


HANDLERS = {
    ("dataset", "build"): cmd_dataset_build,
    ("align", None): cmd_align,
    ("pretrain-diffusion", None): cmd_pretrain_diffusion,
    ("train-adapter", None): cmd_train_adapter,
    ("sample", None): cmd_sample,
    ("evaluate", None): cmd_evaluate,
    ("recipe", "run"): cmd_recipe_run,
    ("report", "diff"): cmd_report_diff,
}


def _status(command, status, **fields):
    print(json.dumps({"command": command, "status": status, **fields}, sort_keys=True))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        _status("usage", "error", error=str(exc))
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    command = " ".join(x for x in (args.command, getattr(args, "action", None)) if x)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    handler = HANDLERS[(args.command, getattr(args, "action", None))]
    try:
        result = handler(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        _status(command, "error", error=str(exc))
        return 2
    except ConfigError as exc:
        print(f"config error at {exc.pointer or '/'}: {exc}", file=sys.stderr)
        _status(command, "error", error=str(exc), pointer=exc.pointer)
        return 2
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        _status(command, "error", error=str(exc), kind=type(exc).__name__)
        return 1
    _status(command, "ok", **result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
