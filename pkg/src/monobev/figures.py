"""Plot helpers for the command-line reports.

Everything renders through the Agg backend straight to image files, so
the commands stay usable on headless machines.  The error overlay is a
plain numpy image; callers pick the container (the CLI writes PPM).
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .world import OBJECT_CLASSES, STATIC_CLASSES

_MEAN_KEYS = ("4-Mean", "7-Mean")


def save_loss_curves(path, history):
    """Line plot of the per-site training losses over epochs."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for site, values in history.items():
        ax.plot(range(len(values)), values, marker=".", label=site)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean focal loss")
    ax.set_title("training loss by supervision site")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_iou_bars(path, report, title="per-class IoU"):
    """Horizontal bars for every class plus the grouped means."""
    names = list(report.class_iou) + list(_MEAN_KEYS)
    values = [report.class_iou[n] for n in report.class_iou]
    values += [report.mean_static, report.mean_overall]
    colors = ["#4878cf"] * len(report.class_iou) + ["#6acc65", "#6acc65"]

    fig, ax = plt.subplots(figsize=(7, 0.45 * len(names) + 1.2))
    y = np.arange(len(names))
    ax.barh(y, values, color=colors)
    ax.set_yticks(y)
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel("IoU")
    ax.set_title(title)
    for yi, v in zip(y, values):
        ax.text(v + 0.01, yi, f"{v:.3f}", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_confusion_heatmap(path, confusion, class_names=None):
    """Object-class confusion counts on a log10 color scale.

    Raw counts span several orders of magnitude (background dominates),
    so the cells are colored by log10(1 + count) while the annotations
    keep the exact integers.
    """
    confusion = np.asarray(confusion)
    if class_names is None:
        class_names = ("background",) + tuple(OBJECT_CLASSES)
    fig, ax = plt.subplots(figsize=(5.5, 4.8))
    im = ax.imshow(np.log10(1.0 + confusion), cmap="viridis")
    ax.set_xticks(range(len(class_names)))
    ax.set_xticklabels(class_names, rotation=45, ha="right")
    ax.set_yticks(range(len(class_names)))
    ax.set_yticklabels(class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title("object confusion (log10 color)")
    mid = np.log10(1.0 + confusion.max()) / 2 if confusion.max() else 0.5
    for i in range(confusion.shape[0]):
        for j in range(confusion.shape[1]):
            shade = "black" if np.log10(1.0 + confusion[i, j]) > mid else "white"
            ax.text(j, i, str(int(confusion[i, j])), ha="center", va="center",
                    color=shade, fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_trend(path, axis_name, values, summaries):
    """Per-class IoU and grouped means against one swept quantity.

    ``values`` may be numeric (frames, noise...) or labels (component
    rows); labels fall back to categorical positions on the x axis.
    """
    numeric = all(isinstance(v, (int, float)) for v in values)
    x = list(values) if numeric else list(range(len(values)))

    fig, ax = plt.subplots(figsize=(7.5, 5))
    names = list(summaries[0].class_iou)
    for name in names:
        ax.plot(x, [s.class_iou[name] for s in summaries],
                marker="o", linewidth=1, alpha=0.55, label=name)
    ax.plot(x, [s.mean_static for s in summaries],
            marker="s", linewidth=2.5, color="black", label="4-Mean")
    ax.plot(x, [s.mean_overall for s in summaries],
            marker="^", linewidth=2.5, color="dimgray", label="7-Mean")
    if not numeric:
        ax.set_xticks(x)
        ax.set_xticklabels(values, rotation=30, ha="right")
    ax.set_xlabel(axis_name)
    ax.set_ylabel("IoU")
    ax.set_title(f"IoU against {axis_name}")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


CLASS_COLORS = {
    "drivable": (0.42, 0.42, 0.46),
    "crossing": (0.92, 0.85, 0.25),
    "walkway": (0.55, 0.35, 0.62),
    "carpark": (0.25, 0.62, 0.68),
    "car": (0.88, 0.26, 0.18),
    "truck": (0.20, 0.42, 0.88),
    "pedestrian": (0.95, 0.55, 0.12),
}

_STATIC_PAINT_ORDER = ("drivable", "carpark", "walkway", "crossing")


def class_composite(static_bin, object_bin, mask):
    """One color image summarising binary class lattices.

    Static classes paint first (later entries of the fixed order win on
    overlap so small classes stay legible), objects paint on top, and
    cells outside the mask drop to near-black.  Returns (H, W, 3) floats.
    """
    static_bin = np.asarray(static_bin, dtype=bool)
    object_bin = np.asarray(object_bin, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    out = np.full(mask.shape + (3,), 0.22)
    for name in _STATIC_PAINT_ORDER:
        channel = STATIC_CLASSES.index(name)
        out[static_bin[..., channel]] = CLASS_COLORS[name]
    for offset, name in enumerate(OBJECT_CLASSES):
        out[object_bin[..., offset + 1]] = CLASS_COLORS[name]
    out[~mask] = 0.08
    return out


def error_overlay(pred, true, mask):
    """Color-coded agreement image for one binary class.

    Green marks cells predicted and labeled, blue marks misses, red
    marks false alarms; everything outside the mask stays a dim gray.
    Returns an (H, W, 3) float array in [0, 1].
    """
    pred = np.asarray(pred, dtype=bool)
    true = np.asarray(true, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != true.shape or pred.shape != mask.shape:
        raise ValueError("overlay inputs must share one shape")
    out = np.full(pred.shape + (3,), 0.15)
    out[mask] = (0.35, 0.35, 0.35)
    out[mask & pred & true] = (0.1, 0.8, 0.1)
    out[mask & ~pred & true] = (0.15, 0.25, 0.9)
    out[mask & pred & ~true] = (0.9, 0.15, 0.1)
    return out
