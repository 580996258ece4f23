"""Figure rendering for the report paths.

Every CLI command that writes delimited output also drops a rendered
figure next to it: ROC curve and score histograms for evaluation,
original/reconstruction/heatmap panels for localization, per-subset bars
for ablations.  Figures are written to files only; no interactive backend
is ever touched.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_roc", "plot_score_hist", "plot_heatmap_panel", "plot_ablation"]

_RC = {
    "figure.dpi": 130,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_roc(points, auroc_value: float, path) -> Path:
    """ROC curve from (fpr, tpr, threshold) triples."""
    fpr = [p[0] for p in points]
    tpr = [p[1] for p in points]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(fpr, tpr, lw=1.8, label=f"AUROC = {auroc_value:.4f}")
        ax.plot([0, 1], [0, 1], "--", color="gray", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(loc="lower right")
    return _save(fig, path)


def plot_score_hist(edges, normal_counts, abnormal_counts, path) -> Path:
    """Overlaid per-class histograms of anomaly scores."""
    widths = [edges[i + 1] - edges[i] for i in range(len(normal_counts))]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.bar(edges[:-1], normal_counts, width=widths, align="edge",
               alpha=0.6, label="normal")
        ax.bar(edges[:-1], abnormal_counts, width=widths, align="edge",
               alpha=0.6, label="abnormal")
        ax.set_xlabel("anomaly score (mean bpd)")
        ax.set_ylabel("count")
        ax.legend()
    return _save(fig, path)


def plot_heatmap_panel(image, reconstruction, heatmap, path, title: str = "") -> Path:
    """Original, reconstruction and squared-error heatmap side by side."""
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
        for ax, (arr, name, cmap) in zip(
            axes,
            [
                (image, "input", "gray"),
                (reconstruction, "reconstruction", "gray"),
                (heatmap, "squared error", "inferno"),
            ],
        ):
            im = ax.imshow(arr, cmap=cmap)
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
            fig.colorbar(im, ax=ax, fraction=0.046)
        if title:
            fig.suptitle(title)
    return _save(fig, path)


def plot_ablation(rows, path) -> Path:
    """Grouped metric bars per scale subset."""
    labels = ["+".join(r["subset"]) for r in rows]
    x = range(len(rows))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.2 + 1.2 * len(rows), 3.2))
        width = 0.27
        for k, metric in enumerate(("auroc", "f1", "acc")):
            ax.bar([i + (k - 1) * width for i in x], [r[metric] for r in rows],
                   width=width, label=metric.upper())
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylim(0, 1.05)
        ax.legend(ncols=3, loc="lower right")
    return _save(fig, path)
