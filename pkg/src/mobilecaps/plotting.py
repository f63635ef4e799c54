"""Matplotlib figures for the ``report`` command (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import roc_auc_binary, roc_curve  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def learning_curve(history: list[dict], path) -> Path:
    """Loss and learning rate per epoch, plus the headline train/val metric."""
    epochs = [h["epoch"] for h in history]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(epochs, [h["loss"] for h in history])
    axes[0].set_title("training loss")
    axes[1].plot(epochs, [h["lr"] for h in history])
    axes[1].set_title("learning rate")
    for split in ("train", "val"):
        rows = [(h["epoch"], h[split]) for h in history if h.get(split)]
        if not rows:
            continue
        key = "r2" if "r2" in rows[0][1] else "accuracy"
        axes[2].plot([e for e, _ in rows], [m[key] if m[key] is not None else np.nan for _, m in rows],
                     label=f"{split} {key}")
    axes[2].legend(loc="lower right")
    axes[2].set_title("metric")
    for ax in axes:
        ax.set_xlabel("epoch")
    return _save(fig, path)


def confusion_figure(confusion, class_names, path) -> Path:
    cm = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(cm, cmap="Blues")
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, str(v), ha="center", va="center")
    ticks = range(len(class_names))
    ax.set_xticks(ticks, class_names)
    ax.set_yticks(ticks, class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    return _save(fig, path)


def roc_figure(scores, truth, class_names, path) -> Path:
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=int)
    fig, ax = plt.subplots(figsize=(4, 4))
    for k, name in enumerate(class_names):
        positive = truth == k
        auc = roc_auc_binary(scores[:, k], positive)
        if auc is None:
            continue
        fpr, tpr = roc_curve(scores[:, k], positive)
        ax.plot(fpr, tpr, label=f"{name} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], color="grey", linestyle=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    return _save(fig, path)


def severity_scatter(p_pred, rale, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter((np.asarray(rale) - 1) / 7, p_pred, s=8)
    ax.plot([0, 1], [0, 1], color="grey", linestyle=":")
    ax.set_xlabel("target (RALE - 1) / 7")
    ax.set_ylabel("predicted p")
    return _save(fig, path)


def tune_trace(values: list[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(values) + 1), values, "o", label="observation")
    ax.plot(range(1, len(values) + 1), np.maximum.accumulate(values), label="best so far")
    ax.set_xlabel("evaluation")
    ax.set_ylabel("objective")
    ax.legend(loc="lower right")
    return _save(fig, path)
