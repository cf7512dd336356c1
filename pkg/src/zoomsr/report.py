"""Static figures and a delimited summary for finished runs."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .imaging import backward_warp, resize_flow  # noqa: E402

METRICS = ("psnr_full", "ssim_full", "psnr_corner", "ssim_corner")


def moving_average(x, n: int):
    x = np.asarray(x, dtype=float)
    if len(x) < n or n <= 1:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[n:] - c[:-n]) / n


def plot_loss_curve(rows: list[dict], path, window: int = 50) -> Path:
    if not rows:
        raise ValueError("empty loss log")
    steps = np.array([r["step"] for r in rows])
    loss = np.array([r["loss"] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, loss, lw=0.6, alpha=0.35, color="tab:blue", label="loss")
    ma = moving_average(loss, window)
    if len(ma) < len(loss):
        ax.plot(steps[window - 1:], ma, color="tab:blue", label=f"{window}-step mean")
    aux = np.array([r.get("aux_loss", np.nan) for r in rows])
    if np.isfinite(aux).any():
        ax2 = ax.twinx()
        ax2.plot(steps, aux, lw=0.8, color="tab:orange", label="aux generator")
        ax2.set_yscale("log")
        ax2.set_ylabel("aux objective")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(arms: list[tuple[str, dict]], path, metric_pair=("psnr_full", "psnr_corner")) -> Path:
    """Grouped bars, arms kept in the given order."""
    if not arms:
        raise ValueError("no arms to plot")
    x = np.arange(len(arms))
    fig, ax = plt.subplots(figsize=(1.4 * len(arms) + 2, 3.5))
    width = 0.8 / len(metric_pair)
    for j, m in enumerate(metric_pair):
        vals = [s[m] for _, s in arms]
        bars = ax.bar(x + (j - (len(metric_pair) - 1) / 2) * width, vals, width, label=m)
        ax.bar_label(bars, fmt="%.2f", fontsize=7)
    ax.set_xticks(x, [a for a, _ in arms], rotation=20)
    ax.set_ylabel("dB")
    lo = min(s[m] for _, s in arms for m in metric_pair)
    ax.set_ylim(lo - 1.0, None)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def montage_panels(lr, out, gt, lr_flow, r_t: int, box):
    """LR (nearest-upsampled), output and aligned GT cropped at the same output coordinates.

    ``box`` = (top, left, size) on the output grid; must be a multiple of r_t.
    """
    top, left, size = box
    if top % r_t or left % r_t or size % r_t:
        raise ValueError("montage box must align with the LR grid")
    aligned = gt if lr_flow is None else backward_warp(gt, resize_flow(lr_flow, out.shape[:2]))
    lr_up = np.repeat(np.repeat(lr, r_t, axis=0), r_t, axis=1)
    sl = (slice(top, top + size), slice(left, left + size))
    return lr_up[sl], out[sl], aligned[sl]


def plot_montage(rows: list[tuple[str, list[np.ndarray]]], path, titles=("LR", "output", "GT")) -> Path:
    n = len(rows)
    fig, axes = plt.subplots(n, len(titles), figsize=(2.2 * len(titles), 2.2 * n), squeeze=False)
    for i, (name, panels) in enumerate(rows):
        for j, p in enumerate(panels):
            ax = axes[i, j]
            ax.imshow(np.clip(p, 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(titles[j], fontsize=9)
            if j == 0:
                ax.set_ylabel(name, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def write_summary_csv(path, arms: list[tuple[str, dict]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("arm",) + METRICS)
        for name, s in arms:
            w.writerow([name] + [f"{s[m]:.6f}" for m in METRICS])
    return path


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
