"""Figure rendering for report paths; every figure lands next to its data file."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image


def save_image_grid(images: torch.Tensor, path) -> Path:
    """Tile (N, 3, R, R) images in [-1, 1] into one PNG; deterministic bytes."""
    n = images.shape[0]
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    r = images.shape[-1]
    canvas = np.zeros((rows * r, cols * r, 3), dtype=np.uint8)
    arr = (
        ((images.clamp(-1, 1) + 1.0) * 127.5)
        .round()
        .to(torch.uint8)
        .permute(0, 2, 3, 1)
        .numpy()
    )
    for i in range(n):
        y, x = divmod(i, cols)
        canvas[y * r : (y + 1) * r, x * r : (x + 1) * r] = arr[i]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path, format="PNG")
    return path


def save_marginal_plots(report, path) -> Path:
    """Histogram per projection of the true vs generated 1-D marginals."""
    dirs = np.asarray(report.projections)
    k = dirs.shape[0]
    fig, axes = plt.subplots(1, k, figsize=(3.2 * k, 3.0), squeeze=False)
    for i in range(k):
        ax = axes[0][i]
        t = report.samples_true @ dirs[i]
        g = report.samples_gen @ dirs[i]
        bins = np.histogram_bin_edges(np.concatenate([t, g]), bins=40)
        ax.hist(t, bins=bins, alpha=0.6, label="target", density=True)
        ax.hist(g, bins=bins, alpha=0.6, label="generated", density=True)
        ax.set_title(f"proj {i}: W1={report.distances[i]:.3f}")
        if i == 0:
            ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_signed_logit_plot(records: list[dict], path) -> Path:
    """Signed-logit fraction over Imgs, from metric-log records."""
    pts = [
        (r["imgs"], r["signed_logit_fraction"])
        for r in records
        if "signed_logit_fraction" in r
    ]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if pts:
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", markersize=2)
    ax.set_xlabel("Imgs")
    ax.set_ylabel("fraction of positive real logits")
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_fid_curve(history: list[tuple[int, float]], path) -> Path:
    """FID over Imgs for snapshot scans."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if history:
        xs, ys = zip(*sorted(history))
        ax.plot(xs, ys, marker="o", markersize=3)
    ax.set_xlabel("Imgs")
    ax.set_ylabel("FID")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_loss_curves(records: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    steps = [r["step"] for r in records if "d_loss" in r]
    if steps:
        ax.plot(steps, [r["d_loss"] for r in records if "d_loss" in r], label="D")
        ax.plot(steps, [r["g_loss"] for r in records if "g_loss" in r], label="G")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
