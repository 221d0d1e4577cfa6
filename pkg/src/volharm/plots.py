"""Report figures: per-method distribution-distance box plots and training
loss curves, written as SVG."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import metrics  # noqa: E402


def wd_box_plot(per_method: dict[str, list[float]], out_path) -> None:
    """Box plot of log Wasserstein distances to the target site, one box per
    method, raw corpus first."""
    names = sorted(per_method, key=lambda n: (n != "raw", n))
    data = [[metrics.log_wd(v) for v in per_method[n]] for n in names]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 4.0))
    ax.boxplot(data, tick_labels=names, showfliers=True)
    ax.set_ylabel("log WD to target site")
    ax.set_title("Intensity-distribution distance by method")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def loss_curves(csv_paths: dict[str, Path], out_path) -> None:
    """Training/validation curves for each stage's losses CSV."""
    fig, axes = plt.subplots(1, len(csv_paths),
                             figsize=(5.0 * len(csv_paths), 3.6),
                             squeeze=False)
    for ax, (label, path) in zip(axes[0], sorted(csv_paths.items())):
        with open(path, encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        epochs = [int(r["epoch"]) for r in rows]
        train_col = "total"
        val_col = "val_rec" if "val_rec" in rows[0] else "val_noise"
        ax.plot(epochs, [float(r[train_col]) for r in rows], label="train")
        ax.plot(epochs, [float(r[val_col]) for r in rows], label=val_col)
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        ax.set_title(label)
        ax.legend()
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
