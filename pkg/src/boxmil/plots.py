"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalkit import decode_overlay  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def dice_bars(reports, path, title: str = "Dice by method") -> None:
    names = [r.method for r in reports]
    means = [r.mean for r in reports]
    stds = [r.std for r in reports]
    fig, ax = plt.subplots(figsize=(max(3.5, 0.9 * len(names) + 1.5), 3.2))
    x = np.arange(len(names))
    ax.bar(x, means, yerr=stds, capsize=3, color="0.55", edgecolor="0.2", linewidth=0.6)
    for xi, m in zip(x, means):
        ax.text(xi, min(m + 0.02, 1.02), f"{m:.3f}", ha="center", va="bottom", fontsize=7)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1.08)
    ax.set_ylabel("mean Dice (2D, per sample)")
    ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)


def loss_curve(runlog, path) -> None:
    it = [r["iteration"] for r in runlog.records]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(it, runlog.losses(), lw=1.0, color="k", label="total")
    for c in range(1, runlog.n_categories + 1):
        ax.plot(it, [r[f"unary_c{c}"] for r in runlog.records], lw=0.8, ls="--",
                label=f"unary c{c}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=7)
    fig.savefig(path)
    plt.close(fig)


def overlay_figure(image, overlay, path, title: str = "") -> None:
    parts = decode_overlay(overlay)
    rgb = np.repeat(np.asarray(image, dtype=float)[..., None], 3, axis=2) * 0.6
    cover = parts["coverage"]
    if cover.max() > 0:
        rgb[..., 1] = np.where(cover > 0, 0.35 + 0.65 * cover / cover.max(), rgb[..., 1])
    rgb[parts["negative"], 2] = np.maximum(rgb[parts["negative"], 2], 0.45)
    rgb[parts["edge"]] = (1.0, 0.1, 0.1)
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    ax.imshow(np.clip(rgb, 0, 1), interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=8)
    fig.savefig(path)
    plt.close(fig)


def prediction_figure(sample, probs, path, threshold: float = 0.5) -> None:
    n_cat = probs.shape[0]
    fig, axes = plt.subplots(n_cat, 3, figsize=(6.5, 2.3 * n_cat), squeeze=False)
    for c in range(n_cat):
        a0, a1, a2 = axes[c]
        a0.imshow(sample.image, cmap="gray", vmin=0, vmax=1)
        for b in sample.boxes:
            if b.category == c + 1:
                a0.add_patch(plt.Rectangle((b.x0 - 0.5, b.y0 - 0.5), b.width, b.height,
                                           fill=False, ec="r", lw=0.8))
        a1.imshow(probs[c], cmap="viridis", vmin=0, vmax=1)
        a2.imshow(sample.masks[c], cmap="gray", vmin=0, vmax=1)
        a2.contour(probs[c] >= threshold, levels=[0.5], colors="r", linewidths=0.8)
        for ax, t in zip(axes[c], ("image + boxes", f"p (category {c + 1})", "truth / prediction")):
            ax.set_title(t, fontsize=8)
            ax.set_axis_off()
    fig.savefig(path)
    plt.close(fig)
