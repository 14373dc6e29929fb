"""PNG figures written next to the CSV outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_confusion(confusion, path, class_names=None, title=None):
    confusion = np.asarray(confusion)
    K = confusion.shape[0]
    names = class_names or [str(k) for k in range(K)]
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * K, 0.8 + 0.7 * K))
    im = ax.imshow(confusion, vmin=0.0, vmax=1.0, cmap="Blues")
    for i in range(K):
        for j in range(K):
            ax.text(j, i, f"{confusion[i, j]:.2f}", ha="center", va="center", fontsize=7,
                    color="white" if confusion[i, j] > 0.5 else "black")
    ax.set_xticks(range(K), names, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(K), names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_loss_curves(rows, path, title=None):
    """``rows`` are ``(epoch, phase, recon, ce, total)``; one line per phase and term."""
    phases = list(dict.fromkeys(r[1] for r in rows))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    offset = {}
    for phase in phases:
        base = phase.replace("-val", "")
        if base not in offset:
            offset[base] = sum(1 + max(r[0] for r in rows if r[1] == p) for p in offset)
        pts = [r for r in rows if r[1] == phase]
        x = [offset[base] + r[0] for r in pts]
        style = "--" if phase.endswith("-val") else "-"
        axes[0].plot(x, [r[2] for r in pts], style, label=phase)
        if any(r[3] for r in pts):
            axes[1].plot(x, [r[3] for r in pts], style, label=phase)
    axes[0].set_ylabel("reconstruction")
    axes[0].set_yscale("log")
    axes[1].set_ylabel("cross-entropy")
    for ax in axes:
        ax.set_xlabel("epoch")
        if ax.lines:
            ax.legend(fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_pretrain_history(history, path):
    """``history`` rows are ``(stage, epoch, train_mse, val_mse)``."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    step = 0
    for stage in sorted({h[0] for h in history}):
        pts = [h for h in history if h[0] == stage]
        x = np.arange(step, step + len(pts))
        ax.plot(x, [h[2] for h in pts], label=f"stage {stage} train")
        if not np.all(np.isnan([h[3] for h in pts])):
            ax.plot(x, [h[3] for h in pts], "--", label=f"stage {stage} val")
        step += len(pts)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("reconstruction mse")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_weights(weights, path, title=None):
    """Heatmap of a velocity/interpolation weight matrix."""
    weights = np.asarray(weights)
    fig, ax = plt.subplots(figsize=(4, 3.5))
    lim = float(np.max(np.abs(weights))) or 1.0
    im = ax.imshow(weights, cmap="RdBu_r", vmin=-lim, vmax=lim)
    ax.set_xlabel("input frame")
    ax.set_ylabel("output frame")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
