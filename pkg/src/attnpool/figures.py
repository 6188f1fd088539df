"""Matplotlib renderings written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}
# PNG metadata carries no timestamp; pin the software tag too so bytes only depend on data
_META = {"Software": "attnpool"}


def _save(fig, path) -> None:
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def plot_inspection(heatmaps, frame_probs, importance_pct, predicted: int, path, class_names=None) -> None:
    """Attention heatmaps per frame and head, per-frame class probabilities and temporal importance.

    heatmaps: (F, N, h, w) already rescaled to max 1 (N may be 0).
    frame_probs: (F, E). importance_pct: (F,) in [0, 100].
    """
    heatmaps = np.asarray(heatmaps)
    frame_probs = np.asarray(frame_probs)
    F, E = frame_probs.shape
    N = heatmaps.shape[1] if heatmaps.ndim == 4 else 0
    names = class_names or [str(c) for c in range(E)]
    rows = N + 2
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, F, figsize=(1.1 * F + 0.6, 1.1 * rows), squeeze=False)
        for f in range(F):
            for h in range(N):
                ax = axes[h, f]
                ax.imshow(heatmaps[f, h], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if f == 0:
                    ax.set_ylabel(f"head {h}")
            ax = axes[N, f]
            colors = ["tab:red" if c == predicted else "0.6" for c in range(E)]
            ax.bar(range(E), frame_probs[f], color=colors)
            ax.set_ylim(0, 1)
            ax.set_xticks(range(E))
            ax.set_xticklabels(names, rotation=90)
            if f:
                ax.set_yticklabels([])
            else:
                ax.set_ylabel("p(c | frame)")
            ax = axes[N + 1, f]
            ax.bar([0], [importance_pct[f]], color="tab:blue")
            ax.set_ylim(0, 100)
            ax.set_xticks([])
            ax.set_xlabel(f"frame {f}")
            if f:
                ax.set_yticklabels([])
            else:
                ax.set_ylabel("importance %")
        _save(fig, path)


def plot_training_log(rows: list[dict], path) -> None:
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(7, 2.6))
        ax_loss.plot(epochs, [r["train_loss"] for r in rows], color="k")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("train loss")
        ax_loss.set_yscale("log")
        ax_acc.plot(epochs, [r["train_acc"] for r in rows], label="train", color="k")
        for key in ("val_acc_tp", "val_acc_avg", "val_acc_max", "val_acc_indep"):
            if key in rows[0]:
                ax_acc.plot(epochs, [r[key] for r in rows], label=key[8:], lw=0.9)
        ax_acc.set_ylim(0, 1.02)
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("accuracy")
        ax_acc.legend(frameon=False)
        _save(fig, path)


def plot_experiment(rows: list[dict], path, title: str = "") -> None:
    names = list(dict.fromkeys(r["variant"] for r in rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.9 * len(names) + 1), 2.8))
        for i, name in enumerate(names):
            accs = [r["val_acc"] for r in rows if r["variant"] == name]
            ax.bar(i, np.mean(accs), color="0.75", edgecolor="k", lw=0.5)
            ax.scatter(np.full(len(accs), i), accs, s=8, color="k", zorder=3)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("validation accuracy")
        if title:
            ax.set_title(title)
        _save(fig, path)
