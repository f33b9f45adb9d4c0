"""Matplotlib figures written next to the command-line reports."""

from __future__ import annotations

import os
from pathlib import Path

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
}


def _figure(width: float = 4.5, height: float = 3.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def smooth(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if window <= 1 or values.size < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def loss_curves(runs: dict[str, list[dict]], path, window: int = 50, log_y: bool = False) -> Path:
    """Smoothed training loss per run, one line each."""
    fig, ax = _figure()
    for label, records in runs.items():
        steps = np.array([r["step"] for r in records])
        loss = smooth([r["loss"] for r in records], window)
        ax.plot(steps[steps.size - loss.size:], loss, lw=1.2, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(f"L1 loss (mean of {window})" if window > 1 else "L1 loss")
    if log_y:
        ax.set_yscale("log")
    if len(runs) > 1:
        ax.legend(frameon=False)
    return _save(fig, path)


def correlation(losses, accuracies, fit, path, labels=None) -> Path:
    """Probe accuracy against training loss with the least-squares line."""
    fig, ax = _figure(3.6, 3.0)
    x = np.asarray(losses)
    y = 100.0 * np.asarray(accuracies)
    ax.scatter(x, y, s=18, zorder=3)
    if labels is not None:
        for xi, yi, lab in zip(x, y, labels):
            ax.annotate(str(lab), (xi, yi), fontsize=6, xytext=(3, 2), textcoords="offset points")
    xs = np.linspace(x.min(), x.max(), 50)
    ax.plot(xs, 100.0 * (fit.slope * xs + fit.intercept), "k--", lw=1)
    ax.set_xlabel("training loss")
    ax.set_ylabel("probe accuracy (%)")
    ax.set_title(f"$R^2$ = {fit.r2:.3f}")
    return _save(fig, path)


def mask_frequency(freq: np.ndarray, path, title: str = "") -> Path:
    """Per-position masking frequency, one panel per temporal slot."""
    t = freq.shape[0]
    cols = min(t, 4)
    rows = int(np.ceil(t / cols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols + 0.8, 1.6 * rows), squeeze=False)
    for i, ax in enumerate(axes.flat):
        if i >= t:
            ax.axis("off")
            continue
        im = ax.imshow(freq[i], vmin=0.0, vmax=1.0, cmap="viridis")
        ax.set_title(f"t'={i}", fontsize=7)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.8)
    if title:
        fig.suptitle(title, fontsize=9)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def sweep(rows: list[dict], path, baseline: dict | None = None) -> Path:
    """Probe accuracy against total FLOPs for each teacher/student split."""
    fig, ax = _figure()
    x = np.array([r["flops_total"] for r in rows])
    y = 100.0 * np.array([r["student_accuracy"] for r in rows])
    ax.plot(x, y, "o-", lw=1.2, label="frozen teacher")
    for r, xi, yi in zip(rows, x, y):
        ax.annotate(f"{r['teacher_steps']}+{r['student_steps']}", (xi, yi), fontsize=6,
                    xytext=(3, 2), textcoords="offset points")
    if baseline is not None:
        ax.scatter([baseline["flops_total"]], [100.0 * baseline["accuracy"]], marker="s", color="C3",
                   label="EMA baseline", zorder=3)
    ax.set_xlabel("training FLOPs")
    ax.set_ylabel("probe accuracy (%)")
    ax.legend(frameon=False)
    return _save(fig, path)


def surprise_histogram(possible, impossible, path) -> Path:
    fig, ax = _figure()
    bins = np.histogram_bin_edges(np.concatenate([possible, impossible]), bins=30)
    ax.hist(possible, bins=bins, alpha=0.6, label="possible")
    ax.hist(impossible, bins=bins, alpha=0.6, label="impossible")
    ax.set_xlabel("global surprise")
    ax.set_ylabel("clips")
    ax.legend(frameon=False)
    return _save(fig, path)
