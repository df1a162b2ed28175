"""Static figures for the CLI's ``--plot`` flag (loss curves, pose-error curves)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from bindesc.evaluate import AUC_THRESHOLDS  # noqa: E402

_COMPONENTS = ("total", "triplet", "sos", "r_l2")


def loss_curves(rows, path):
    """Per-step loss components with an epoch-mean overlay for the total."""
    step = np.array([r["step"] for r in rows])
    epoch = np.array([r["epoch"] for r in rows])
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for c in _COMPONENTS:
        ax.plot(step, [r[c] for r in rows], lw=0.8, label=c)
    if len(rows):
        ue = np.unique(epoch)
        mean = [np.mean([r["total"] for r in rows if r["epoch"] == e]) for e in ue]
        last = [step[epoch == e].max() for e in ue]
        ax.plot(last, mean, "k.-", lw=1.2, label="epoch mean (total)")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def pose_error_curve(errors, path, thresholds=AUC_THRESHOLDS, label=None):
    """Cumulative fraction of pairs below each pose error (failures never count)."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    hi = max(thresholds)
    f = e[e <= hi]
    xs = np.concatenate([[0.0], f, [hi]])
    ys = np.concatenate([[0.0], np.arange(1, len(f) + 1), [len(f)]]) / len(e)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.step(xs, ys, where="post", lw=1.4, label=label)
    for th in thresholds:
        ax.axvline(th, color="0.7", lw=0.6, ls="--")
    ax.set_xlim(0, hi)
    ax.set_ylim(0, 1)
    ax.set_xlabel("pose error [deg]")
    ax.set_ylabel("fraction of pairs")
    if label:
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def distance_histograms(positive, negative, path, threshold=None):
    """Positive vs negative descriptor distances for a verification run."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    bins = np.linspace(0, max(np.max(positive), np.max(negative)), 60)
    ax.hist(positive, bins, alpha=0.6, density=True, label="positive")
    ax.hist(negative, bins, alpha=0.6, density=True, label="negative")
    if threshold is not None:
        ax.axvline(threshold, color="k", lw=1, label="95% recall")
    ax.set_xlabel("distance")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
