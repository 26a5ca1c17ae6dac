"""Matplotlib figures written next to the text reports (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import LogitStats, RobustnessReport, TransferMatrix  # noqa: E402

_META = {"Software": None}  # keep files free of version strings


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_logit_histograms(stats: dict[str, LogitStats], path) -> Path:
    fig, axes = plt.subplots(1, len(stats), figsize=(4 * len(stats), 3), squeeze=False)
    for ax, (name, s) in zip(axes[0], stats.items()):
        widths = np.diff(s.bin_edges)
        ax.bar(s.bin_edges[:-1], s.counts / max(s.count, 1), width=widths, align="edge", color="tab:blue")
        ax.set_title(f"{name} (var {s.variance:.2f})")
        ax.set_xlabel("logit value")
    axes[0][0].set_ylabel("fraction")
    fig.tight_layout()
    return _save(fig, path)


def plot_accuracy_bars(reports: list[RobustnessReport], path) -> Path:
    columns: list[str] = []
    for r in reports:
        columns.extend(c for c in r.adversaries if c not in columns)
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(columns), 3.2))
    width = 0.8 / max(len(reports), 1)
    x = np.arange(len(columns))
    for i, r in enumerate(reports):
        acc = [100 * r.accuracies.get(c, np.nan) for c in columns]
        ax.bar(x + i * width, acc, width, label=r.method)
    ax.set_xticks(x + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(columns)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_transfer_matrix(matrix: TransferMatrix, path) -> Path:
    acc = 100 * matrix.accuracy
    fig, ax = plt.subplots(figsize=(1.5 + 1.1 * len(matrix.sources), 1.2 + 0.6 * len(matrix.targets)))
    im = ax.imshow(acc, vmin=0, vmax=100, cmap="viridis")
    ax.set_xticks(range(len(matrix.sources)))
    ax.set_xticklabels(matrix.sources, rotation=30, ha="right")
    ax.set_yticks(range(len(matrix.targets)))
    ax.set_yticklabels(matrix.targets)
    ax.set_xlabel("source")
    ax.set_ylabel("target")
    for (i, j), v in np.ndenumerate(acc):
        ax.text(j, i, f"{v:.1f}", ha="center", va="center", color="white" if v < 50 else "black", fontsize=8)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)
