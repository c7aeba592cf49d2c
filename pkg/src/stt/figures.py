"""Report figures rendered to files next to the delimited outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import FormatError


def plot_training_log(csv_path, out_path) -> Path:
    """Loss components over iterations, from the training CSV."""
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise FormatError(f"{csv_path}: empty training log")
    iters = [int(r["iter"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for column, label in (("l_rank", "ranking"), ("l_ic", "captioning"),
                          ("l_sp", "paraphrasing"), ("total", "total")):
        ax.plot(iters, [float(r[column]) for r in rows], label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_retrieval_report(report: dict, out_path) -> Path:
    """Grouped bars of R@K per direction."""
    ks = [1, 5, 10]
    i2t = [report.get(f"i2t_r@{k}", 0.0) for k in ks]
    t2i = [report.get(f"t2i_r@{k}", 0.0) for k in ks]
    x = range(len(ks))
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.38
    ax.bar([i - width / 2 for i in x], i2t, width, label="image to text")
    ax.bar([i + width / 2 for i in x], t2i, width, label="text to image")
    ax.set_xticks(list(x), [f"R@{k}" for k in ks])
    ax.set_ylabel("recall (%)")
    ax.set_ylim(0, 105)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_generation_report(report: dict, out_path, title: str) -> Path:
    """Bars for BLEU@1..4 and METEOR."""
    labels = ["B@1", "B@2", "B@3", "B@4", "METEOR"]
    values = [report.get("b@1", 0.0), report.get("b@2", 0.0),
              report.get("b@3", 0.0), report.get("b@4", 0.0),
              report.get("meteor", 0.0)]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, values)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
