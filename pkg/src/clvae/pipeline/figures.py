"""Matplotlib figures for reports and sweeps. Always rendered to files (Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLORS = {"normal": "#1f77b4", "anomaly": "#d62728"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_figure(steps: list[dict], path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    x = [r["step"] for r in steps]
    for key in ("total", "recon", "perceptual"):
        axes[0].plot(x, [r[key] for r in steps], label=key, lw=1)
    axes[0].set_yscale("log")
    axes[0].set_xlabel("step")
    axes[0].legend()
    axes[1].plot(x, [r["kl"] for r in steps], color="k", lw=1)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("kl")
    return _save(fig, path)


def roc_figure(curve, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(curve.fpr, curve.tpr, drawstyle="steps-post", label=f"AUROC {curve.auc:.3f}")
    ax.plot([0, 1], [0, 1], ls=":", color="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    return _save(fig, path)


def scatter_figure(rows: list[dict], path) -> Path:
    """PCA scatter; colour is the true label, hollow markers are misclassified."""
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for label, color in COLORS.items():
        for hit in (True, False):
            pts = [r for r in rows if r["true_label"] == label and (r["predicted_label"] == label) == hit]
            if not pts:
                continue
            ax.scatter([float(r["pc1"]) for r in pts], [float(r["pc2"]) for r in pts], s=12,
                       facecolors=color if hit else "none", edgecolors=color,
                       label=label if hit else f"{label} (misclassified)")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=8)
    return _save(fig, path)


def boxplot_figure(groups: dict[str, list[float]], path) -> Path:
    fig, ax = plt.subplots(figsize=(1.6 * len(groups) + 2, 3.5))
    ax.boxplot(list(groups.values()))
    ax.set_xticks(range(1, len(groups) + 1), list(groups.keys()), rotation=20)
    ax.set_ylabel("mean discrepancy score")
    return _save(fig, path)


def sweep_figure(rows: list[dict], axis: str, path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    labels = [str(r["value"]) for r in rows]
    for ax, key in zip(axes, ("fid", "mse", "accuracy")):
        ax.plot(labels, [r[key] for r in rows], marker="o")
        ax.set_xlabel(axis)
        ax.set_ylabel(key)
    return _save(fig, path)
