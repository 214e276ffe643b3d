"""Matplotlib figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(history: dict, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("loss_d", "loss_g", "wasserstein", "gp"):
        if key in history:
            ax.plot(np.arange(1, len(history[key]) + 1), history[key], label=key, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_sample_grid(images, path, ncols: int = 8, title: str = "") -> Path:
    images = [np.asarray(getattr(im, "pixels", im)) for im in images]
    nrows = max(1, -(-len(images) // ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(ncols * 1.1, nrows * 1.1 + 0.3), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, im in zip(axes.ravel(), images):
        ax.imshow(im, cmap="gray", vmin=0.0, vmax=1.0)
    if title:
        fig.suptitle(title, fontsize=9)
    return _save(fig, path)


def plot_metric_bars(cells: list, metric: str, path, classifier: str) -> Path:
    """Grouped bars: augmentation on x, one bar per (scope, fraction), error bars = std."""
    chosen = [c for c in cells if c["spec"]["classifier"] == classifier]
    augs = list(dict.fromkeys(c["spec"]["augmentation"] for c in chosen))
    groups = list(dict.fromkeys((c["spec"]["scope"], c["spec"]["data_fraction"]) for c in chosen))
    fig, ax = plt.subplots(figsize=(max(6, len(augs) * 1.2), 3.8))
    width = 0.8 / max(len(groups), 1)
    for gi, (scope, frac) in enumerate(groups):
        means, stds = [], []
        for aug in augs:
            match = [c for c in chosen if c["spec"]["augmentation"] == aug
                     and (c["spec"]["scope"], c["spec"]["data_fraction"]) == (scope, frac)]
            means.append(match[0]["aggregate"]["mean"][metric] if match else np.nan)
            stds.append(match[0]["aggregate"]["std"][metric] if match else 0.0)
        x = np.arange(len(augs)) + (gi - (len(groups) - 1) / 2) * width
        ax.bar(x, means, width, yerr=stds, label=f"{scope} {round(frac * 100)}%", capsize=2)
    ax.set_xticks(np.arange(len(augs)))
    ax.set_xticklabels(augs, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel(metric)
    ax.set_title(f"{classifier}: test {metric} (mean, std over seeds)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_val_histories(cells: list, path, seed_index: int = 0) -> Path:
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    for c in cells:
        runs = c["per_seed"]
        if len(runs) > seed_index:
            h = runs[seed_index]["val_auprc"]
            ax.plot(np.arange(1, len(h) + 1), h, lw=0.8, label=c["cell"])
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation AUPRC")
    if len(cells) <= 8:
        ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(fig, path)
