"""Static figures: loss curves, per-class F1 bars, cluster composition grids."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import load_image  # noqa: E402


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        for k in ("loss_s", "loss_u", "val_f1", "val_acc"):
            r[k] = float(r[k]) if r[k] not in ("", None) else float("nan")
    return rows


def plot_losses(rows, out):
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    phases = list(dict.fromkeys(r["phase"] for r in rows))
    offset, ticks = 0, []
    for phase in phases:
        pr = [r for r in rows if r["phase"] == phase]
        n_ep = max(r["epoch"] for r in pr) + 1
        for head, style in (("normal", "-"), ("overcluster", "--")):
            hr = sorted((r for r in pr if r["head_type"] == head), key=lambda r: r["epoch"])
            if not hr:
                continue
            x = [offset + r["epoch"] for r in hr]
            axes[0].plot(x, [r["loss_s"] for r in hr], style, label=f"{phase}/{head}")
            axes[1].plot(x, [r["loss_u"] for r in hr], style, label=f"{phase}/{head}")
            axes[2].plot(x, [r["val_f1"] for r in hr], style, label=f"{phase}/{head}")
        offset += n_ep
        ticks.append(offset)
    for ax, title in zip(axes, ("supervised loss", "unsupervised loss (-MI)", "validation macro-F1")):
        ax.set_title(title)
        ax.set_xlabel("epoch")
        for t in ticks[:-1]:
            ax.axvline(t - 0.5, color="grey", lw=0.6)
    axes[2].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def plot_f1_bars(report, out, class_names=None):
    best = report["best"]
    k = len(best["normal"]["per_class_f1"])
    names = class_names or [str(c) for c in range(k)]
    x = np.arange(k)
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * k), 3.5))
    for off, head in ((-0.2, "normal"), (0.2, "overcluster")):
        vals = [np.nan if v is None else v for v in best[head]["per_class_f1"]]
        ax.bar(x + off, vals, width=0.4, label=f"{head} (head {best[head]['head']})")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("F1")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def plot_cluster_grid(report, data_dir, out, max_clusters=12, per_row=10):
    examples = report.get("cluster_examples", {})
    clusters = sorted(examples, key=lambda c: -len(examples[c]))[:max_clusters]
    if not clusters:
        return False
    fig, axes = plt.subplots(len(clusters), per_row, figsize=(per_row * 0.9, len(clusters) * 0.95),
                             squeeze=False)
    for row, c in zip(axes, clusters):
        paths = examples[c][:per_row]
        for i, ax in enumerate(row):
            ax.axis("off")
            if i < len(paths):
                img = load_image(Path(data_dir) / paths[i])
                ax.imshow(img.squeeze(), cmap="gray" if img.shape[-1] == 1 else None, vmin=0, vmax=1)
        row[0].set_title(f"cluster {c}", fontsize=7, loc="left")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return True
