"""Figure rendering for CLI reports. Uses the Agg backend so plots write
straight to files in headless runs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .optim import TrainHistory
from .vmf import VmfStats

_DPI = 150


def plot_history(history: TrainHistory, out_path) -> None:
    """Loss curves per epoch; FPR on a twin axis when recorded."""
    epochs = [r.epoch for r in history.records]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [r.fos for r in history.records], label="first-order loss")
    ax.plot(epochs, [r.sos for r in history.records], label="second-order loss")
    ax.plot(epochs, [r.total for r in history.records], label="total loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    fprs = [r.fpr95 for r in history.records]
    if any(v is not None for v in fprs):
        ax2 = ax.twinx()
        ax2.plot(epochs, fprs, color="tab:red", linestyle="--", label="FPR@95")
        ax2.set_ylabel("FPR@95")
        ax2.legend(loc="upper right")
    ax.legend(loc="upper left")
    ax.set_title("training history")
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)


def plot_sweep(rows: list[dict], out_path) -> None:
    """Heatmap of FPR@95 over the (N, K) grid; failed cells left blank."""
    ns = sorted({int(r["n"]) for r in rows})
    ks = sorted({int(r["k"]) for r in rows})
    grid = np.full((len(ns), len(ks)), np.nan)
    for r in rows:
        if r.get("fpr95") is not None:
            grid[ns.index(int(r["n"])), ks.index(int(r["k"]))] = r["fpr95"]
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(grid, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(ks)), [str(k) for k in ks])
    ax.set_yticks(range(len(ns)), [str(n) for n in ns])
    ax.set_xlabel("K (neighbors)")
    ax.set_ylabel("N (pairs per batch)")
    for i in range(len(ns)):
        for j in range(len(ks)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center",
                        color="white", fontsize=8)
    fig.colorbar(im, ax=ax, label="FPR@95")
    ax.set_title("N/K sweep")
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)


def plot_vmf_stats(stats: VmfStats, out_path) -> None:
    """Per-class concentration estimates with the aggregate lines."""
    r_bars = [c.r_bar for c in stats.per_class]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(sorted(r_bars), marker=".", linestyle="none", label="per-class R")
    ax.axhline(stats.r_intra, color="tab:green", linestyle="--",
               label=f"R_intra = {stats.r_intra:.4f}")
    ax.axhline(stats.r_inter, color="tab:red", linestyle=":",
               label=f"R_inter = {stats.r_inter:.4f}")
    ax.set_xlabel("class (sorted by R)")
    ax.set_ylabel("mean resultant length")
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.set_title(f"hypersphere utilization (rho = {stats.rho:.4f})")
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)


def plot_distance_histograms(pos_dists, neg_dists, out_path, tau=None) -> None:
    """Positive/negative pair distance distributions for verification."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    bins = np.linspace(0.0, 2.0, 81)
    ax.hist(pos_dists, bins=bins, alpha=0.6, label="same-class pairs", density=True)
    ax.hist(neg_dists, bins=bins, alpha=0.6, label="cross-class pairs", density=True)
    if tau is not None:
        ax.axvline(tau, color="k", linestyle="--", label=f"tau = {tau:.4f}")
    ax.set_xlabel("L2 distance")
    ax.set_ylabel("density")
    ax.legend()
    ax.set_title("pair distance distributions")
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)


def plot_sphere(vectors: np.ndarray, labels: np.ndarray, out_path) -> None:
    """3-D scatter of unit vectors colored by class; only valid for q=3."""
    if vectors.shape[1] != 3:
        raise ValueError("sphere scatter requires dimension 3")
    fig = plt.figure(figsize=(6, 6))
    ax = fig.add_subplot(projection="3d")
    ax.scatter(vectors[:, 0], vectors[:, 1], vectors[:, 2],
               c=labels, cmap="tab10", s=24)
    u = np.linspace(0, 2 * np.pi, 40)
    v = np.linspace(0, np.pi, 20)
    ax.plot_wireframe(
        np.outer(np.cos(u), np.sin(v)),
        np.outer(np.sin(u), np.sin(v)),
        np.outer(np.ones_like(u), np.cos(v)),
        color="gray", alpha=0.15, linewidth=0.5,
    )
    ax.set_box_aspect((1, 1, 1))
    ax.set_title("embedding on S^2")
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)
