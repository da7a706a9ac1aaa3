"""PNG rendering of curves and confusion matrices (matplotlib, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from asffnet.evaluation import ConfusionMatrix, Curve  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_curves(path, curves: dict[str, Curve], kind: str) -> None:
    """One line per model; ``kind`` is ``"roc"`` or ``"pr"``."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, c in curves.items():
        if kind == "pr":
            ax.step(c.points[:, 0], c.points[:, 1], where="post", label=f"{name} (AUC {c.auc:.4f})")
        else:
            ax.plot(c.points[:, 0], c.points[:, 1], label=f"{name} (AUC {c.auc:.4f})")
    if kind == "roc":
        ax.plot([0, 1], [0, 1], color="0.7", linestyle="--", linewidth=1)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.set_title("ROC curve")
    else:
        ax.set_xlabel("Recall (sensitivity)")
        ax.set_ylabel("Precision")
        ax.set_title("Precision-recall curve")
    ax.set_xlim(-0.01, 1.01)
    ax.set_ylim(-0.01, 1.01)
    ax.legend(loc="lower right" if kind == "roc" else "lower left", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_confusion(path, cm: ConfusionMatrix, title: str = "") -> None:
    grid = [[cm.tn, cm.fp], [cm.fn, cm.tp]]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(grid, cmap="Blues")
    for i in range(2):
        for j in range(2):
            ax.text(j, i, str(grid[i][j]), ha="center", va="center", fontsize=14)
    ax.set_xticks([0, 1], ["benign", "malignant"])
    ax.set_yticks([0, 1], ["benign", "malignant"])
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
