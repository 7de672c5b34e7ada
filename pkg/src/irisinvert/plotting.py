"""Matplotlib figures written next to the delimited outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.figsize": (6, 4.5),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.titlesize": 12,
    "axes.labelsize": 11,
    "legend.fontsize": 9,
    "savefig.dpi": 120,
}

# no Software / date chunks so identical data gives identical bytes
_PNG_META = {"Software": None}

FAR_FLOOR = 1e-4


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_roc_curves(curves: Mapping[str, Sequence[tuple]], path, title: str = "Type-2 ROC") -> Path:
    """One TAR-vs-FAR step curve per row; FAR on a log axis floored at 1e-4."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for name, rows in curves.items():
            if not rows:
                continue
            arr = np.asarray(sorted(rows), dtype=float)
            far = np.concatenate([[FAR_FLOOR], np.maximum(arr[:, 0], FAR_FLOOR)])
            tar = np.concatenate([[0.0], arr[:, 1]])
            ax.step(far, tar, where="post", label=name)
        ax.axvline(0.01, color="0.5", lw=0.8, ls="--")
        ax.set_xscale("log")
        ax.set_xlim(FAR_FLOOR, 1.0)
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel("false acceptance rate")
        ax.set_ylabel("true acceptance rate")
        ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_history(history: Sequence[dict], keys: Sequence[str], path, title: str = "") -> Path:
    """Per-epoch curves for the given history keys."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for k in keys:
            pts = [(r["epoch"], r[k]) for r in history if k in r]
            if pts:
                e, v = zip(*pts)
                ax.plot(e, v, label=k)
        ax.set_xlabel("epoch")
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def image_grid(images: Sequence[np.ndarray], path, ncols: int = 8, titles: Sequence[str] | None = None) -> Path:
    n = len(images)
    nrows = max(1, -(-n // ncols))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(nrows, ncols, figsize=(1.4 * ncols, 1.4 * nrows), squeeze=False)
        for i, ax in enumerate(axes.flat):
            ax.axis("off")
            if i < n:
                ax.imshow(images[i], cmap="gray", vmin=0, vmax=1)
                if titles:
                    ax.set_title(titles[i], fontsize=6)
        return _save(fig, path)
