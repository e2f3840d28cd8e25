"""Static report figures rendered to SVG with matplotlib (Agg backend).

Every figure function takes the same in-memory values that the CLI writes to
CSV, so the CSV and the picture cannot drift apart.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import MAX_FPR  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 4.0),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "comapipe",  # stable element ids -> reproducible files
    "svg.fonttype": "none",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_roc(fpr: Sequence[float], tpr: Sequence[float], auc: float, path,
             theta_point=None) -> Path:
    """ROC curve with the 5% false-positive limit drawn as a vertical line."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(fpr, tpr, color="tab:blue", lw=1.5, label=f"ROC (AUC = {auc:.3f})")
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls=":")
        ax.axvline(MAX_FPR, color="tab:red", ls="--", lw=1, label=f"FPR = {MAX_FPR:.2f}")
        if theta_point is not None:
            ax.plot(*theta_point, "o", color="tab:red", ms=5, label="selected threshold")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def plot_sweep(thetas, accuracy, fpr, fnr, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(thetas, accuracy, color="tab:blue", label="Accuracy")
        ax.plot(thetas, fpr, color="tab:red", ls="--", label="FPR")
        ax.plot(thetas, fnr, color="tab:green", ls="-.", label="FNR")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("Threshold on P(Poor)")
        ax.set_ylabel("Rate")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_importances(names: Sequence[str], importances: Sequence[float], path,
                     top: int = 20) -> Path:
    imp = np.asarray(importances, dtype=float)
    order = np.argsort(-imp, kind="stable")[:top][::-1]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 0.22 * len(order) + 1.0))
        ax.barh(np.arange(len(order)), imp[order], color="tab:blue")
        ax.set_yticks(np.arange(len(order)))
        ax.set_yticklabels([names[i] for i in order])
        ax.set_xlabel("Importance")
        ax.grid(axis="y", visible=False)
        return _save(fig, path)


def plot_spectrogram(values: np.ndarray, band_centers, frame_times, path, title="") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.5))
        mesh = ax.pcolormesh(frame_times, band_centers, values, shading="nearest",
                             cmap="magma", rasterized=True)
        fig.colorbar(mesh, ax=ax, label="dB re peak")
        ax.set_xlabel("Time (s)")
        ax.set_ylabel("Frequency (Hz)")
        ax.grid(False)
        if title:
            ax.set_title(title)
        return _save(fig, path)
