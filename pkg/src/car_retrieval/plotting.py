"""Matplotlib figures for training logs, retrieval reports and ablation tables."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps saved PNGs byte-stable across runs
_SAVE = dict(dpi=100, metadata={"Software": None})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_training_log(log_lines: Iterable[str], path) -> Path:
    """Per-step loss components (left) and validation R@1 per epoch (right)."""
    steps, totals, comps = [], [], {}
    epochs, i2r, r2i = [], [], []
    for line in log_lines:
        rec = json.loads(line)
        if rec["event"] == "step":
            steps.append(rec["step"])
            totals.append(rec["total"])
            for k, v in rec["components"].items():
                comps.setdefault(k, ([], []))
                comps[k][0].append(rec["step"])
                comps[k][1].append(v)
        elif rec["event"] == "epoch":
            epochs.append(rec["epoch"])
            i2r.append(rec["val_i2r_r1"])
            r2i.append(rec["val_r2i_r1"])

    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    if steps:
        ax_loss.plot(steps, totals, label="total", color="black", linewidth=1.2)
        for k, (xs, ys) in sorted(comps.items()):
            ax_loss.plot(xs, ys, label=k, linewidth=0.8, alpha=0.8)
        ax_loss.legend(fontsize=8)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_val.plot(epochs, i2r, marker="o", label="image→recipe")
    ax_val.plot(epochs, r2i, marker="s", label="recipe→image")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation R@1")
    ax_val.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_recall(reports: Sequence, path) -> Path:
    """Grouped R@1/5/10 bars for each (direction, protocol) report."""
    labels = [f"{r.direction} {r.protocol}" for r in reports]
    ks = ("R@1", "R@5", "R@10")
    values = np.array([[r.mean.as_dict()[k] for k in ks] for r in reports])
    fig, ax = plt.subplots(figsize=(max(5, 1.4 * len(reports)), 4))
    x = np.arange(len(reports))
    width = 0.8 / len(ks)
    for j, k in enumerate(ks):
        ax.bar(x + (j - 1) * width, values[:, j], width, label=k)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("recall")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows: Sequence, path, direction: str = "i2r", protocol: str = "CAR") -> Path:
    """R@1 per ablation row for one direction/protocol."""
    labels, r1 = [], []
    for row in rows:
        for rep in row.reports:
            if rep.direction == direction and rep.protocol == protocol:
                labels.append(row.label)
                r1.append(rep.mean.r1)
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(labels)), 4))
    ax.bar(np.arange(len(labels)), r1, color="tab:blue")
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(f"{direction} R@1 ({protocol})")
    ax.set_ylim(0, max(r1 + [0.05]) * 1.15)
    fig.tight_layout()
    return _save(fig, path)
