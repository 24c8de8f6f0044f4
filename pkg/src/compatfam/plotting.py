"""Matplotlib figures written next to the CSV reports."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

# keeps repeated runs byte-stable
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def plot_history(history, path, title=None):
    """Train/val loss and val AUC per epoch."""
    with plt.rc_context(_RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.8))
        ep = [r["epoch"] for r in history]
        ax1.plot(ep, [r["train_loss"] for r in history], label="train")
        ax1.plot(ep, [r["val_loss"] for r in history], label="val")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend(frameon=False)
        ax2.plot(ep, [r["val_auc"] for r in history], color="C2")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("val AUC")
        if title:
            fig.suptitle(title)
        _save(fig, path)


def plot_gan_curves(curve, path):
    keys = ["L_D", "L_G", "Omega_c", "Omega_enc", "Omega_prj", "L_gp"]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(2, 3, figsize=(8, 4.2), sharex=True)
        steps = [r["step"] for r in curve]
        for ax, key in zip(axes.ravel(), keys):
            ax.plot(steps, [r[key] for r in curve], lw=1)
            ax.set_title(key)
        for ax in axes[1]:
            ax.set_xlabel("step")
        _save(fig, path)


def plot_roc(scores, labels, path, label=None):
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) > 0
    order = np.argsort(-scores, kind="mergesort")
    tp = np.r_[0, np.cumsum(pos[order])] / max(pos.sum(), 1)
    fp = np.r_[0, np.cumsum(~pos[order])] / max((~pos).sum(), 1)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        ax.plot(fp, tp, label=label)
        ax.plot([0, 1], [0, 1], ls=":", color="0.6")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        if label:
            ax.legend(frameon=False, loc="lower right")
        _save(fig, path)


def plot_image_grid(image, path, title=None):
    with plt.rc_context(_RC):
        h, w = image.shape
        fig, ax = plt.subplots(figsize=(max(2.0, w / 24), max(2.0, h / 24)))
        ax.imshow(image, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_comparison(summary, bound, path):
    """Mean test AUC (with std) per model, with the symmetric-scorer ceiling."""
    labels = ["L2" if s["mode"] == "l2" else f"K={s['K']}" for s in summary]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        x = np.arange(len(summary))
        ax.bar(x, [s["auc_mean"] for s in summary], yerr=[s["auc_std"] for s in summary],
               color=["0.6" if s["mode"] == "l2" else "C0" for s in summary], capsize=3)
        ax.axhline(bound, ls="--", color="C3", lw=1, label="symmetric bound")
        ax.set_xticks(x, labels)
        ax.set_ylim(0.5, 1.0)
        ax.set_ylabel("test AUC")
        ax.legend(frameon=False, loc="lower right")
        _save(fig, path)
