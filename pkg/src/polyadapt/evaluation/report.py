"""Evaluation reports: per-language rows, aggregates and their file forms."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from polyadapt.errors import ContractViolation
from polyadapt.toyworld import ANCHOR

REPORT_VERSION = 1
ROW_FIELDS = ("lang_id", "n", "sim_mean", "frechet", "retrieval")
AGGREGATES = ("anchor", "train_mean", "holdout_mean")


@dataclass
class LangRow:
    lang_id: str
    n: int
    sim_mean: float
    frechet: float
    retrieval: float

    def __post_init__(self):
        if not -100.0 <= self.sim_mean <= 100.0:
            raise ContractViolation(f"{self.lang_id}: SIM {self.sim_mean} outside [-100, 100]")
        if self.frechet < 0:
            raise ContractViolation(f"{self.lang_id}: negative Frechet distance")
        if not 0.0 <= self.retrieval <= 1.0:
            raise ContractViolation(f"{self.lang_id}: retrieval {self.retrieval} outside [0, 1]")


def _mean_row(name, rows):
    if not rows:
        return {"group": name, "n": 0, "sim_mean": None, "frechet": None, "retrieval": None}
    return {
        "group": name,
        "n": int(sum(r.n for r in rows)),
        "sim_mean": float(np.mean([r.sim_mean for r in rows])),
        "frechet": float(np.mean([r.frechet for r in rows])),
        "retrieval": float(np.mean([r.retrieval for r in rows])),
    }


@dataclass
class EvalReport:
    rows: list
    train_langs: list
    holdout_langs: list
    metadata: dict = field(default_factory=dict)

    def row(self, lang_id) -> LangRow:
        for r in self.rows:
            if r.lang_id == lang_id:
                return r
        raise KeyError(lang_id)

    def aggregates(self):
        by_group = {
            "anchor": [r for r in self.rows if r.lang_id == ANCHOR],
            "train_mean": [r for r in self.rows if r.lang_id in self.train_langs],
            "holdout_mean": [r for r in self.rows if r.lang_id in self.holdout_langs],
        }
        return [_mean_row(name, by_group[name]) for name in AGGREGATES]

    def aggregate(self, name):
        return next(a for a in self.aggregates() if a["group"] == name)

    def all_rows(self):
        """Per-language rows followed by the three aggregate rows."""
        return [asdict(r) for r in self.rows] + self.aggregates()

    def to_json(self):
        return {
            "version": REPORT_VERSION,
            "rows": [asdict(r) for r in self.rows],
            "aggregates": self.aggregates(),
            "train_langs": list(self.train_langs),
            "holdout_langs": list(self.holdout_langs),
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, d):
        return cls([LangRow(**r) for r in d["rows"]], d["train_langs"], d["holdout_langs"],
                   d.get("metadata", {}))


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def write_report(report: EvalReport, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(
        json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    with open(directory / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in report.rows:
            w.writerow([r.lang_id, r.n, _fmt(r.sim_mean), _fmt(r.frechet), _fmt(r.retrieval)])


def read_report(path) -> EvalReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return EvalReport.from_json(json.loads(path.read_text()))


def write_projection(path, coords, prompt_ids, lang_ids):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("point_id", "prompt_id", "lang_id", "x", "y"))
        for i, ((x, y), p, lang) in enumerate(zip(coords, prompt_ids, lang_ids)):
            w.writerow([i, p, lang, f"{x:.6f}", f"{y:.6f}"])


def diff_reports(a: dict, b: dict, path=""):
    """Leaf-level differences between two JSON documents as (pointer, left, right)."""
    out = []
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b)):
            p = f"{path}/{k}"
            if k not in a or k not in b:
                out.append((p, a.get(k), b.get(k)))
            else:
                out.extend(diff_reports(a[k], b[k], p))
    elif isinstance(a, list) and isinstance(b, list) and len(a) == len(b):
        for i, (x, y) in enumerate(zip(a, b)):
            out.extend(diff_reports(x, y, f"{path}/{i}"))
    elif a != b:
        out.append((path or "/", a, b))
    return out
