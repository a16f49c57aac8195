"""Figure rendering for training curves, retrieval metrics, similarity
matrices and the inference-cost scaling comparison.

All functions write a PNG to the given path and return that path; the
Agg backend keeps them usable in headless runs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

RECALL_FIELDS = ("r1_i2t", "r5_i2t", "r10_i2t", "r1_t2i", "r5_t2i", "r10_t2i")


def plot_loss_curves(history, path):
    """Per-epoch loss components from a training history (list of the
    JSON-lines log records)."""
    fig, ax = plt.subplots(figsize=(7, 4))
    keys = sorted({k for rec in history for k in rec if k.startswith("loss_")})
    epochs = [rec["epoch"] for rec in history]
    for key in keys:
        values = [rec.get(key) for rec in history]
        xs = [e for e, v in zip(epochs, values) if v is not None]
        ys = [v for v in values if v is not None]
        ax.plot(xs, ys, marker="o", markersize=3, label=key[len("loss_"):])
    for boundary in _stage_boundaries(history):
        ax.axvline(boundary, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _stage_boundaries(history):
    out = []
    for prev, cur in zip(history, history[1:]):
        if prev["stage"] != cur["stage"]:
            out.append((prev["epoch"] + cur["epoch"]) / 2)
    return out


def plot_recall_bars(report, path):
    """Bar chart of the six retrieval recalls."""
    fig, ax = plt.subplots(figsize=(7, 4))
    values = [report[f] for f in RECALL_FIELDS]
    ax.bar(range(6), values, color=["C0"] * 3 + ["C1"] * 3)
    ax.set_xticks(range(6))
    ax.set_xticklabels(["R@1", "R@5", "R@10", "R@1", "R@5", "R@10"])
    ax.set_ylabel("recall (%)")
    ax.set_ylim(0, 100)
    ax.text(1, 95, "image-to-text", ha="center")
    ax.text(4, 95, "text-to-image", ha="center")
    ax.set_title(f"Rsum = {report['rsum']:.1f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_similarity_heatmap(sims, path, max_items=64):
    """Image-caption cosine similarity matrix (clipped to the first
    ``max_items`` rows/columns for readability)."""
    sims = np.asarray(sims)[:max_items, :max_items]
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(sims, cmap="viridis", aspect="auto")
    fig.colorbar(im, ax=ax, label="cosine similarity")
    ax.set_xlabel("caption index")
    ax.set_ylabel("image index")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_scaling(records, path):
    """Log-log median retrieval time vs gallery size for each benchmark
    mode, with the fitted exponent in the legend."""
    from .bench import fit_scaling_exponent

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for record in records:
        slope, stderr = fit_scaling_exponent(record)
        ax.plot(record.sizes, record.median_ms, marker="o",
                label=f"{record.mode} (slope {slope:.2f} ± {stderr:.2f})")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("gallery size n")
    ax.set_ylabel("median time (ms)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
