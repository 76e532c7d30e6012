"""Report figures. Uses the non-interactive Agg backend; every function writes a PNG."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_madgap(rows: Sequence[str], values: np.ndarray, path: str | Path) -> Path:
    """Bars of mean MADGap per configuration, with one dot per seed."""
    values = np.asarray(values)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(rows))
    ax.bar(x, values.mean(axis=0), color="#7a9cc6", label="mean")
    for s in range(values.shape[0]):
        ax.plot(x, values[s], ".", color="#333333", alpha=0.35, markersize=4)
    ax.set_xticks(x, rows, rotation=20)
    ax.set_ylabel("MADGap")
    ax.set_title("Over-smoothing by encoder depth (untrained)")
    return _save(fig, path)


def plot_relational(blocks: Sequence[dict], path: str | Path) -> Path:
    """Simple/complex relational word counts next to caption scores, per IoU threshold."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3.5))
    rel = blocks[0]["relational"] if blocks else {"simple": 0, "complex": 0}
    left.bar(["simple", "complex"], [rel["simple"], rel["complex"]], color=["#7a9cc6", "#c67a7a"])
    left.set_ylabel("word count")
    left.set_title("Relational words in generated captions")
    metrics = ["cider", "bleu4", "rougeL"]
    width = 0.8 / max(len(blocks), 1)
    for i, b in enumerate(blocks):
        right.bar(np.arange(3) + i * width, [b[m] for m in metrics], width, label=f"k={b['k']:g}")
    right.set_xticks(np.arange(3) + width * (len(blocks) - 1) / 2, ["C", "B-4", "R"])
    right.set_title("m@kIoU")
    if blocks:
        right.legend()
    return _save(fig, path)


def plot_losses(losses: Sequence[float], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(1, len(losses) + 1), losses, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean token cross-entropy")
    return _save(fig, path)
