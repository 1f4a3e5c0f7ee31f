"""Static figures for the report command: 2-D PCA projections and aggregate bars."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .baselines import pca  # noqa: E402

# PNG metadata normally carries the matplotlib version; dropping it keeps files byte-stable
_SAVE_KW = {"metadata": {"Software": None}, "dpi": 120}


def project_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] < 2:
        return np.column_stack([X[:, 0], np.zeros(len(X))])
    return pca(X, 2)


def _scatter(ax, P, labels, title):
    labels = np.asarray(labels).astype(str)
    cats = np.unique(labels)
    cmap = plt.get_cmap("tab20" if cats.size > 10 else "tab10")
    for i, c in enumerate(cats):
        sel = labels == c
        ax.scatter(P[sel, 0], P[sel, 1], s=6, color=cmap(i % cmap.N), label=c, linewidths=0)
    ax.set_title(title)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    if cats.size <= 12:
        ax.legend(fontsize=6, markerscale=2, frameon=False, loc="best")


def plot_projection(P, batch, bio, title: str, path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    _scatter(axes[0], P, batch, f"{title}: batch")
    _scatter(axes[1], P, bio, f"{title}: biology")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_aggregates(reports: Sequence, path) -> None:
    names = [r.method for r in reports]
    vals = np.array([[r.batch_corr, r.bio, r.overall] for r in reports])
    x = np.arange(len(names))
    w = 0.27
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names) + 2), 3.5))
    for j, lab in enumerate(("batch", "bio", "overall")):
        ax.bar(x + (j - 1) * w, vals[:, j], w, label=lab)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
