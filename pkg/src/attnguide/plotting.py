"""Matplotlib figures written next to the CSV/text outputs."""

from __future__ import annotations

import contextlib
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    # keep files reproducible
    "svg.hashsalt": "attnguide",
}


@contextlib.contextmanager
def figure(path, ncols: int = 1, width: float = 4.5, height: float = 3.0):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
        try:
            yield fig, axes[0]
            fig.savefig(Path(path), metadata={"Software": None} if str(path).endswith(".png") else None)
        finally:
            plt.close(fig)


def plot_training_curves(metrics, path, smooth: int = 50) -> None:
    """MLM loss and AG loss against step (left/right panels)."""
    steps = metrics.column("step")
    with figure(path, ncols=2) as (fig, (ax_mlm, ax_ag)):
        ax_mlm.plot(steps, metrics.column("mlm_loss"), lw=0.5, alpha=0.35, color="C0")
        ax_mlm.plot(steps, metrics.running_mean("mlm_loss", smooth), lw=1.2, color="C0")
        ax_mlm.set_xlabel("step")
        ax_mlm.set_ylabel("MLM loss")
        ag = metrics.column("ag_loss")
        ax_ag.plot(steps, ag, lw=0.8, color="C1", label="AG loss")
        ax_ag.set_xlabel("step")
        ax_ag.set_ylabel("AG loss")
        if np.any(ag > 0):
            ax_ag.set_yscale("log")
        twin = ax_ag.twinx()
        twin.plot(steps, metrics.column("alpha"), lw=0.8, ls="--", color="0.5")
        twin.set_ylabel("alpha")


def plot_pattern(matrix: np.ndarray, path, tokens: Sequence[str] | None = None, title: str = "") -> None:
    n = matrix.shape[0]
    size = min(6.0, 1.5 + 0.35 * n)
    with figure(path, width=size, height=size) as (fig, (ax,)):
        im = ax.imshow(matrix, cmap="Blues", vmin=0.0, vmax=1.0)
        if tokens is not None and n <= 40:
            ax.set_xticks(range(n), tokens, rotation=90)
            ax.set_yticks(range(n), tokens)
        ax.set_xlabel("attended position")
        ax.set_ylabel("query position")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)


def plot_probe_accuracy(accuracy: np.ndarray, path) -> None:
    L, H = accuracy.shape
    with figure(path, width=1.5 + 0.6 * H, height=1.2 + 0.5 * L) as (fig, (ax,)):
        im = ax.imshow(accuracy, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto")
        ax.set_xticks(range(H))
        ax.set_yticks(range(L))
        ax.set_xlabel("head")
        ax.set_ylabel("layer")
        for k in range(L):
            for j in range(H):
                ax.text(j, k, f"{accuracy[k, j]:.2f}", ha="center", va="center", fontsize=7,
                        color="w" if accuracy[k, j] < 0.5 else "k")
        fig.colorbar(im, ax=ax)


def plot_ablation(labels: Sequence[str], deltas: Sequence[float], path) -> None:
    with figure(path, width=4.0, height=2.6) as (fig, (ax,)):
        colors = ["C3" if d > 0 else "C2" for d in deltas]
        ax.bar(range(len(deltas)), deltas, color=colors)
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xticks(range(len(labels)), labels, rotation=20)
        ax.set_ylabel("increase in MLM loss")
