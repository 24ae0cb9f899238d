"""Figure and raster outputs for run/eval artifacts."""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from PIL import Image  # noqa: E402


def save_image(path, array: np.ndarray) -> None:
    """Lossless PNG of a float image in [0, 1] (RGB) or a depth map (grayscale)."""
    a = np.asarray(array)
    if a.ndim == 2:
        hi = a.max() if a.max() > 0 else 1.0
        a = a / hi
    img = (np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img).save(path)


def plot_trajectory(path, est, gt=None) -> None:
    """Top-down (x, y) camera-center plot of estimated vs ground truth."""
    fig, ax = plt.subplots(figsize=(5, 5))
    c = np.stack([p.center() for _, p in est])
    ax.plot(c[:, 0], c[:, 1], "-", color="tab:blue", label="estimated")
    if gt is not None:
        g = np.stack([p.center() for _, p in gt])
        ax.plot(g[:, 0], g[:, 1], "--", color="tab:orange", label="ground truth")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss(path, history) -> None:
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(history, lw=0.8)
    ax.set_xlabel("optimization step")
    ax.set_ylabel("mapping loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metrics_table(metrics: dict) -> str:
    width = max((len(k) for k in metrics), default=1)
    lines = [f"{k.ljust(width)}  {v:.4f}" for k, v in metrics.items()
             if v is not None]
    return "\n".join(lines)
