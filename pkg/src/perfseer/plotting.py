"""Report figures: training curves and predicted-vs-measured scatter plots.

Rendered with the Agg backend and written without PNG metadata so the
same inputs give byte-identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_history(epochs: Sequence[dict], path, best_epoch: int | None = None) -> Path:
    """Train/validation loss (log scale) above the learning-rate trace."""
    ep = [e["epoch"] for e in epochs]
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True,
                                         gridspec_kw={"height_ratios": [2, 1]})
    ax_loss.semilogy(ep, [e["train_loss"] for e in epochs], label="train")
    ax_loss.semilogy(ep, [e["val_loss"] for e in epochs], label="validation")
    if best_epoch:
        ax_loss.axvline(best_epoch, color="grey", linestyle=":", label=f"best (epoch {best_epoch})")
    ax_loss.set_ylabel("MSE (normalized targets)")
    ax_loss.legend(loc="upper right")
    ax_lr.semilogy(ep, [e["lr"] for e in epochs], color="tab:green", drawstyle="steps-post")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("epoch")
    fig.tight_layout()
    return _save(fig, path)


def plot_predictions(rows: Sequence[tuple], path) -> Path:
    """One log-log panel per target from ``(graph_id, target, y_true, y_pred)`` rows."""
    targets = list(dict.fromkeys(r[1] for r in rows))
    fig, axes = plt.subplots(1, len(targets), figsize=(4 * len(targets), 4), squeeze=False)
    for ax, t in zip(axes[0], targets):
        yt = np.array([r[2] for r in rows if r[1] == t])
        yp = np.array([r[3] for r in rows if r[1] == t])
        lo, hi = min(yt.min(), yp.min()), max(yt.max(), yp.max())
        ax.loglog(yt, yp, ".", markersize=3, alpha=0.6)
        ax.plot([lo, hi], [lo, hi], color="black", linewidth=0.8)
        ax.set_title(t)
        ax.set_xlabel("oracle")
        ax.set_ylabel("predicted")
    fig.tight_layout()
    return _save(fig, path)
