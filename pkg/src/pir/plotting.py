"""PNG figures written next to the TSV reports (non-interactive backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(p, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return p


def plot_training_curves(path, curves: dict[str, list[float]]) -> Path:
    fig, axes = plt.subplots(1, len(curves), figsize=(4 * len(curves), 3), squeeze=False)
    for ax, (name, values) in zip(axes[0], curves.items()):
        v = np.asarray(values, dtype=float)
        ax.plot(np.arange(len(v)), v, lw=0.6, alpha=0.4, color="tab:blue")
        if len(v) >= 20:
            w = max(len(v) // 50, 5)
            smooth = np.convolve(v, np.ones(w) / w, mode="valid")
            ax.plot(np.arange(w - 1, len(v)), smooth, color="tab:blue")
        ax.set_yscale("log")
        ax.set_title(name)
        ax.set_xlabel("step")
    axes[0][0].set_ylabel("training loss")
    return _save(fig, path)


def plot_frame_metrics(path, frames, psnr, ssim) -> Path:
    fig, ax1 = plt.subplots(figsize=(6, 3))
    ax1.plot(frames, psnr, "o-", color="tab:blue", label="PSNR")
    ax1.set_xlabel("frame")
    ax1.set_ylabel("PSNR [dB]", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(frames, ssim, "s--", color="tab:orange", label="SSIM")
    ax2.set_ylabel("SSIM", color="tab:orange")
    ax1.set_title("held-out frames")
    return _save(fig, path)


def plot_context_ablation(path, ks, val_ratio, sensitivity) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    labels = [str(k) for k in ks]
    a.bar(labels, val_ratio, color="tab:blue")
    a.set_xlabel("sequence length k")
    a.set_ylabel("val MSE / target variance")
    b.bar(labels, np.maximum(np.asarray(sensitivity, dtype=float), 1e-300), color="tab:green")
    b.set_yscale("log")
    b.set_xlabel("sequence length k")
    b.set_ylabel("|change| after permuting past frames")
    return _save(fig, path)


def plot_jitter(path, spreads, variances) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([f"s={s:g}" for s in spreads], variances, color=["tab:gray", "tab:blue"][:len(spreads)])
    ax.set_ylabel("output variance under perturbation")
    ax.set_yscale("log")
    return _save(fig, path)


def plot_gradcheck(path, names, errors, tolerance) -> Path:
    fig, ax = plt.subplots(figsize=(6, max(3, 0.18 * len(names))))
    y = np.arange(len(names))
    ax.barh(y, np.maximum(np.asarray(errors, dtype=float), 1e-16), color="tab:blue")
    ax.axvline(tolerance, color="tab:red", ls="--")
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=6)
    ax.set_xscale("log")
    ax.set_xlabel("max relative error over seeds")
    return _save(fig, path)
