"""PNG renderings of the CSV outputs, written next to them.

Uses ``matplotlib.figure.Figure`` directly, so no pyplot global state or
interactive backend is involved.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.figure import Figure

DPI = 110


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    return path


def plot_accuracy(curves: Mapping[str, Sequence[float]], path, title: str = "Test accuracy") -> Path:
    """One line per label; x is the 1-based round index."""
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    for label, acc in curves.items():
        ax.plot(np.arange(1, len(acc) + 1), acc, label=label, lw=1.2)
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_band(curves: Mapping[str, np.ndarray], path, title: str = "Mean accuracy over seeds") -> Path:
    """``curves[label]`` is (seeds, rounds); draws the mean with a min/max band."""
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    for label, acc in curves.items():
        acc = np.atleast_2d(acc)
        x = np.arange(1, acc.shape[1] + 1)
        (line,) = ax.plot(x, acc.mean(axis=0), label=label, lw=1.2)
        ax.fill_between(x, acc.min(axis=0), acc.max(axis=0), color=line.get_color(), alpha=0.2)
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_counts(m: np.ndarray, snr_db: np.ndarray, path, title: str = "Selections per client") -> Path:
    fig = Figure(figsize=(7, 3.5))
    ax = fig.add_subplot()
    k = np.arange(len(m))
    ax.bar(k, m, color="tab:blue", alpha=0.8)
    ax.set_xlabel("client")
    ax.set_ylabel("times selected")
    ax.set_xticks(k)
    ax2 = ax.twinx()
    ax2.plot(k, snr_db, "o", color="tab:red", ms=4)
    ax2.set_ylabel("SNR (dB)", color="tab:red")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_profile(p_true: np.ndarray, p_hat: np.ndarray, path) -> Path:
    """Side-by-side heatmaps, classes on rows and clients on columns."""
    fig = Figure(figsize=(9, 3.5))
    axes = fig.subplots(1, 2, sharey=True)
    vmax = float(max(p_true.max(), p_hat.max()))
    for ax, mat, name in zip(axes, (p_true, p_hat), ("true proportions", "estimated proportions")):
        im = ax.imshow(mat, aspect="auto", cmap="viridis", vmin=0.0, vmax=vmax)
        ax.set_title(name)
        ax.set_xlabel("client")
    axes[0].set_ylabel("class")
    fig.colorbar(im, ax=list(axes), shrink=0.8)
    return _save(fig, path)


def plot_kappa(kappa: Mapping[str, Sequence[float]], path) -> Path:
    fig = Figure(figsize=(4.5, 4))
    ax = fig.add_subplot()
    labels = list(kappa)
    ax.boxplot([np.asarray(kappa[k]) for k in labels])
    ax.set_xticks(range(1, len(labels) + 1), labels)
    ax.set_ylabel("mean estimation error (%)")
    ax.set_title("Proportion error by initialisation")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_partition(counts: np.ndarray, path) -> Path:
    """Stacked bars of per-client class counts; ``counts`` is (classes, clients)."""
    fig = Figure(figsize=(7, 3.5))
    ax = fig.add_subplot()
    k = np.arange(counts.shape[1])
    bottom = np.zeros(counts.shape[1])
    for c, row in enumerate(counts):
        ax.bar(k, row, bottom=bottom, label=str(c), width=0.8)
        bottom += row
    ax.set_xlabel("client")
    ax.set_ylabel("samples")
    ax.set_xticks(k)
    ax.legend(title="class", fontsize=7, ncol=2, bbox_to_anchor=(1.01, 1), loc="upper left")
    fig.tight_layout()
    return _save(fig, path)
