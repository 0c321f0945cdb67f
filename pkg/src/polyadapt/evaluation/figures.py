"""PNG figures rendered next to the CSV outputs (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def report_bars(report, path, title="SIM per language"):
    langs = [r.lang_id for r in report.rows]
    sims = [r.sim_mean for r in report.rows]
    colors = ["tab:orange" if lang == "anchor" else
              "tab:gray" if lang in report.holdout_langs else "tab:blue" for lang in langs]
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(langs) + 1), 3))
    ax.bar(range(len(langs)), sims, color=colors)
    ax.set_xticks(range(len(langs)), langs, rotation=45, ha="right")
    ax.set_ylabel("SIM")
    ax.set_title(title)
    return _save(fig, path)


def grouped_bars(cells, values, path, ylabel="SIM", title="", baseline=None):
    """``values[cell]`` is a list over seeds; bars show the mean, dots the seeds."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for i, cell in enumerate(cells):
        v = np.asarray(values[cell], float)
        ax.bar(i, v.mean(), color="tab:blue", alpha=0.7)
        ax.scatter(np.full(len(v), i), v, color="k", s=10, zorder=3)
    if baseline is not None:
        ax.axhline(baseline, color="tab:red", ls="--", lw=1, label="unconditional")
        ax.legend(loc="best", fontsize=8)
    ax.set_xticks(range(len(cells)), cells)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return _save(fig, path)


def sweep_line(labels, means, path, xlabel="data fraction", ylabel="non-anchor SIM", title=""):
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(range(len(labels)), means, marker="o")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return _save(fig, path)


def projection_scatter(coords, prompt_ids, path, title=""):
    coords = np.asarray(coords)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(coords[:, 0], coords[:, 1], c=np.asarray(prompt_ids), cmap="tab20", s=12)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.set_title(title)
    return _save(fig, path)


def loss_curves(curves: dict, path, window=50):
    fig, ax = plt.subplots(figsize=(5, 3))
    for name, curve in curves.items():
        c = np.asarray(curve, float)
        if len(c) == 0:
            continue
        w = max(1, min(window, len(c)))
        ax.plot(np.convolve(c, np.ones(w) / w, mode="valid"), label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (moving average)")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    return _save(fig, path)
