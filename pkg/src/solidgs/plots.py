"""Report figures for training logs, evaluations and view-count sweeps."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("L_c", "L_nc", "L_d", "L_nr", "L_nd", "L_s")


def _finite(xs, ys):
    pairs = [(x, y) for x, y in zip(xs, ys) if y is not None and math.isfinite(y)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def plot_training(rows, path) -> None:
    """Loss components, solidness, Gaussian count and holdout PSNR against iteration."""
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    it = [r["iter"] for r in rows]
    ax = axes[0, 0]
    for k in LOSS_KEYS:
        x, y = _finite(it, [r[k] if r[k] > 0 else float("nan") for r in rows])
        if x:
            ax.plot(x, y, label=k, lw=0.8)
    ax.set_yscale("log")
    ax.set_title("loss components")
    ax.legend(fontsize=7)
    axes[0, 1].plot(it, [r["beta_g"] for r in rows], color="tab:red")
    axes[0, 1].set_title("beta_g")
    axes[1, 0].plot(it, [r["num_gaussians"] for r in rows], color="tab:green")
    axes[1, 0].set_title("Gaussians")
    x, y = _finite(it, [r["psnr_holdout"] for r in rows])
    axes[1, 1].plot(x, y, "o-", color="tab:purple")
    axes[1, 1].set_title("holdout PSNR (dB)")
    for a in axes.flat:
        a.set_xlabel("iteration")
        a.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_eval(psnr_rows, chamfer=None, path=None) -> None:
    """Per-view PSNR bars, with the Chamfer terms annotated when present."""
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [r["view"] for r in psnr_rows]
    vals = [r["psnr"] for r in psnr_rows]
    ax.bar(range(len(vals)), vals, color="tab:blue")
    ax.set_xticks(range(len(vals)), names, rotation=30, fontsize=8)
    ax.set_ylabel("PSNR (dB)")
    title = "holdout PSNR"
    if chamfer is not None:
        title += f"   acc {chamfer['accuracy']:.4f}  comp {chamfer['completion']:.4f}  CD {chamfer['chamfer']:.4f}"
    ax.set_title(title, fontsize=9)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_viewsweep(rows, path) -> None:
    """Accuracy, completion and Chamfer distance against the number of input views."""
    fig, ax = plt.subplots(figsize=(6, 4))
    views = [r["views"] for r in rows]
    for key, style in (("accuracy", "s--"), ("completion", "^--"), ("chamfer", "o-")):
        ax.plot(views, [r[key] for r in rows], style, label=key)
    ax.set_xlabel("input views")
    ax.set_ylabel("distance (scene units)")
    ax.set_xticks(views)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
