"""Matplotlib figure rendering for fit logs, training curves, and reports.

Figures are written next to the delimited outputs; the Agg backend keeps
everything headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_fit_convergence(log, path):
    """Per-iteration mean sampled boundary distance, overall and per label."""
    from .anatomy import SURFACE_LABEL_NAMES

    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    its = np.arange(1, len(log.mean_distance) + 1)
    ax.plot(its, log.mean_distance, "k-o", ms=3.5, label="all labels")
    for target, series in sorted(log.per_label.items()):
        ax.plot(its, series, lw=0.9, alpha=0.7,
                label=SURFACE_LABEL_NAMES.get(target, str(target)))
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean |d(v)| (NDC)")
    ax.set_yscale("log")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_training_history(history, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(np.arange(1, len(history) + 1), history, "-")
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_quality_histograms(aspr_values, jacr_values, path):
    fig, axes = plt.subplots(1, 2, figsize=(7.2, 3.0))
    axes[0].hist(aspr_values, bins=40, color="tab:blue")
    axes[0].set_xlabel("aspect ratio")
    axes[1].hist(jacr_values, bins=40, color="tab:orange")
    axes[1].set_xlabel("scaled jacobian")
    for ax in axes:
        ax.set_ylabel("faces")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_metrics_summary(reports, path):
    """Mean +/- std bars of the headline metrics plus a Dice/ASD scatter."""
    keys = ("dice_mean", "hausdorff_vox", "asd_mm", "aspect_ratio",
            "scaled_jacobian", "normal_consistency")
    fig, axes = plt.subplots(1, 2, figsize=(8.4, 3.2))
    vals = {k: np.array([r.to_dict()[k] for r in reports]) for k in keys}
    means = [vals[k].mean() for k in keys]
    stds = [vals[k].std() for k in keys]
    x = np.arange(len(keys))
    axes[0].bar(x, means, yerr=stds, capsize=3, color="tab:gray")
    axes[0].set_xticks(x)
    axes[0].set_xticklabels([k.replace("_", "\n") for k in keys], fontsize=7)
    axes[0].set_ylabel("mean over cases")
    axes[1].scatter(vals["asd_mm"], vals["dice_mean"], s=14)
    axes[1].set_xlabel("ASD (mm)")
    axes[1].set_ylabel("mean Dice")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
