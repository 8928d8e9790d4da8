"""Matplotlib renderings of the study outputs, written next to the CSVs.

All helpers take already-computed rows/arrays (the same data the CSV writers
receive) and save a PNG; nothing here recomputes results, so the figures and
the delimited outputs cannot disagree.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def _save(fig, path):
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)


def save_metrics_curves(path, metrics):
    """Training loss and validation PSNR/SSIM per epoch."""
    epochs = [m["epoch"] for m in metrics]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
    axes[0].semilogy(epochs, [m["train_loss"] for m in metrics], "o-")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("train loss")
    axes[1].plot(epochs, [m["val_psnr"] for m in metrics], "o-")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("val PSNR [dB]")
    axes[2].plot(epochs, [m["val_ssim"] for m in metrics], "o-")
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("val SSIM")
    for ax in axes:
        ax.grid(alpha=0.3)
    _save(fig, path)


def save_inversion_error(path, rows):
    ls = [r["L"] for r in rows]
    means = [r["mean_error"] for r in rows]
    stds = [r["std_error"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(ls, means, yerr=stds, fmt="o-", capsize=3)
    ax.set_yscale("log")
    ax.set_xlabel("Lipschitz parameter L")
    ax.set_ylabel("mean inversion error")
    ax.grid(alpha=0.3)
    _save(fig, path)


def save_local_approx(path, rows):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    one_minus = sorted({r["one_minus_L"] for r in rows})
    for oml in one_minus:
        errs = [r["error"] for r in rows if r["one_minus_L"] == oml]
        ax.scatter([oml] * len(errs), errs, s=12, alpha=0.6)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("1 - L")
    ax.set_ylabel("forward approximation error")
    ax.grid(alpha=0.3)
    _save(fig, path)


def save_approx_quality(path, rows):
    deltas = [r["delta"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    axes[0].plot(deltas, [r["mean_psnr"] for r in rows], "o-")
    axes[0].set_ylabel("PSNR(phi(x), F(x)) [dB]")
    axes[1].plot(deltas, [r["mean_ssim"] for r in rows], "o-")
    axes[1].set_ylabel("SSIM(phi(x), F(x))")
    for ax in axes:
        ax.set_xlabel("training noise level")
        ax.grid(alpha=0.3)
    _save(fig, path)


def save_direction(path, trace, h, x0):
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    steps = [t["step"] for t in trace]
    axes[0].plot(steps, [t["objective"] for t in trace], "-")
    axes[0].set_xlabel("accepted step")
    axes[0].set_ylabel("|d_h phi|^2 - |d_h F|^2")
    axes[0].grid(alpha=0.3)
    axes[1].imshow(x0, cmap="gray")
    axes[1].set_title("base image")
    axes[1].axis("off")
    lim = np.max(np.abs(h))
    axes[2].imshow(h, cmap="seismic", vmin=-lim, vmax=lim)
    axes[2].set_title("ascent direction")
    axes[2].axis("off")
    _save(fig, path)


def save_cluster_map(path, image, pixels, assignments, title=""):
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    ax.imshow(image, cmap="gray")
    assignments = np.asarray(assignments)
    for cid in np.unique(assignments):
        pts = np.asarray([p for p, a in zip(pixels, assignments) if a == cid])
        ax.scatter(pts[:, 1], pts[:, 0], s=6, label=f"cluster {cid}")
    ax.legend(loc="upper right", fontsize=7)
    ax.set_title(title)
    ax.axis("off")
    _save(fig, path)


def save_mean_patches(path, report):
    k = report.k
    fig, axes = plt.subplots(1, k, figsize=(2.6 * k, 2.8), squeeze=False)
    for cid in range(k):
        ax = axes[0][cid]
        patch = report.mean_patches[cid]
        lim = np.max(np.abs(patch)) or 1.0
        ax.imshow(patch, cmap="seismic", vmin=-lim, vmax=lim)
        tag = " (edges)" if cid == report.edge_cluster else ""
        ax.set_title(f"cluster {cid}{tag}\n{report.edge_percent[cid]:.0f}% edges", fontsize=8)
        ax.axis("off")
    _save(fig, path)


def save_choose_k(path, curves):
    ks = np.arange(1, len(curves.w) + 1)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
    axes[0].plot(ks, curves.w, "o-")
    axes[0].set_ylabel("within-cluster dispersion")
    axes[1].errorbar(ks, curves.gap, yerr=curves.sd, fmt="o-", capsize=3)
    axes[1].set_ylabel("gap statistic")
    axes[2].plot(ks, curves.gap_star, "o-")
    axes[2].set_ylabel("gap* statistic")
    for ax in axes:
        ax.set_xlabel("k")
        ax.grid(alpha=0.3)
        ax.axvline(curves.recommended_k, color="gray", ls="--", lw=0.8)
    _save(fig, path)


def save_reconstruction_grid(path, triples, titles=("clean", "distorted", "reconstruction")):
    n = len(triples)
    fig, axes = plt.subplots(n, 3, figsize=(7, 2.4 * n), squeeze=False)
    for i, triple in enumerate(triples):
        for j, img in enumerate(triple):
            ax = axes[i][j]
            if img is None:
                ax.axis("off")
                continue
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            if i == 0:
                ax.set_title(titles[j], fontsize=9)
            ax.axis("off")
    _save(fig, path)
