"""PNG figures for run reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(records: list[dict], path) -> Path:
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("L_cls", "L_mim", "L_total"):
        ax.plot(steps, [r[key] for r in records], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def schedule_curves(records: list[dict], path) -> Path:
    steps = [r["step"] for r in records]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key in zip(axes, ("lr", "wd", "momentum")):
        ax.plot(steps, [r[key] for r in records])
        ax.set_title(key)
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def pca_panel(images, renders, path, titles=None) -> Path:
    """Input images above their PCA renders, one column per image."""
    n = len(renders)
    fig, axes = plt.subplots(2, n, figsize=(2 * n, 4), squeeze=False)
    for j in range(n):
        axes[0, j].imshow(np.clip(images[j], 0, 1))
        axes[1, j].imshow(renders[j], interpolation="nearest")
        if titles:
            axes[0, j].set_title(titles[j], fontsize=8)
        for ax in axes[:, j]:
            ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def probe_bars(results: dict[str, float], path, chance: float | None = None) -> Path:
    names = list(results)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(names, [results[k] for k in names], color="#4a7ab7")
    if chance is not None:
        ax.axhline(chance, color="grey", linestyle="--", linewidth=1)
    ax.set_ylim(0, 1)
    ax.set_ylabel("test accuracy")
    fig.tight_layout()
    return _save(fig, path)
