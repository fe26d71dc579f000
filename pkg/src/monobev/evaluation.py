"""Masked per-class metrics for grid predictions.

All metrics run over an evaluation mask (visible, non-occluded cells);
everything outside it is ignored.  A class absent from both prediction and
truth scores an IoU of 1.0 so that easy empty scenes do not drag averages
down.  Object channels are one-hot with a leading background class; the
background is part of the confusion matrix but not of the IoU averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, ShapeMismatchError, UnknownClassError
from .world import OBJECT_CLASSES, STATIC_CLASSES


def iou(prediction, truth, mask=None) -> float:
    """Intersection over union of two binary maps, 1.0 when both are empty."""
    prediction = np.asarray(prediction, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if prediction.shape != truth.shape:
        raise ShapeMismatchError(f"prediction {prediction.shape} vs truth {truth.shape}")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != prediction.shape:
            raise ShapeMismatchError(f"mask {keep.shape} vs maps {prediction.shape}")
        prediction = prediction & keep
        truth = truth & keep
    union = np.count_nonzero(prediction | truth)
    if union == 0:
        return 1.0
    return np.count_nonzero(prediction & truth) / union


def threshold_predictions(static_probs, object_probs, static_threshold: float = 0.5):
    """Binarise per-cell scores.

    Static channels are independent and go positive at or above the
    threshold; the object block picks the highest-scoring class (ties keep
    the lowest index, i.e. lean towards background).
    """
    static_probs = np.asarray(static_probs, dtype=float)
    object_probs = np.asarray(object_probs, dtype=float)
    static_binary = (static_probs >= static_threshold).astype(float)
    idx = np.argmax(object_probs, axis=-1)
    one_hot = np.zeros_like(object_probs)
    np.put_along_axis(one_hot, idx[..., None], 1.0, axis=-1)
    return static_binary, one_hot


def confusion_matrix(true_classes, predicted_classes, n_classes: int, mask=None) -> np.ndarray:
    """Counts with true classes along rows and predictions along columns."""
    true_classes = np.asarray(true_classes).reshape(-1)
    predicted_classes = np.asarray(predicted_classes).reshape(-1)
    if true_classes.shape != predicted_classes.shape:
        raise ShapeMismatchError("class index arrays differ in shape")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        true_classes = true_classes[keep]
        predicted_classes = predicted_classes[keep]
    if true_classes.size and (
        true_classes.min() < 0 or true_classes.max() >= n_classes
        or predicted_classes.min() < 0 or predicted_classes.max() >= n_classes
    ):
        raise ValueError("class index outside 0..n_classes-1")
    flat = true_classes * n_classes + predicted_classes
    counts = np.bincount(flat, minlength=n_classes * n_classes)
    return counts.reshape(n_classes, n_classes)


@dataclass(eq=False)
class EvaluationReport:
    """Per-class IoU plus the object confusion matrix over masked cells."""

    class_iou: dict  # class name -> float
    mean_static: float
    mean_overall: float
    confusion: np.ndarray  # (n_objects + 1, n_objects + 1), background first
    cell_count: int

    def iou_for(self, name: str) -> float:
        try:
            return self.class_iou[name]
        except KeyError:
            raise UnknownClassError(f"no class named {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "class_iou": {k: float(v) for k, v in self.class_iou.items()},
            "mean_static": float(self.mean_static),
            "mean_overall": float(self.mean_overall),
            "confusion": self.confusion.tolist(),
            "cell_count": int(self.cell_count),
        }


def evaluate(static_pred, object_pred, static_true, object_true, mask) -> EvaluationReport:
    """Score binary static maps and one-hot object maps against the truth.

    ``static_*`` are (..., C_S) binary, ``object_*`` (..., C_O + 1) one-hot
    with background first.  The object IoU of a foreground class compares
    its one-hot slices; the static/overall means are plain averages over 4
    and 4 + 3 classes respectively.
    """
    static_pred = np.asarray(static_pred, dtype=float)
    static_true = np.asarray(static_true, dtype=float)
    object_pred = np.asarray(object_pred, dtype=float)
    object_true = np.asarray(object_true, dtype=float)
    keep = np.asarray(mask, dtype=bool)
    if static_pred.shape != static_true.shape or object_pred.shape != object_true.shape:
        raise ShapeMismatchError("prediction/truth shapes differ")
    if static_pred.shape[-1] != len(STATIC_CLASSES):
        raise ShapeMismatchError(f"expected {len(STATIC_CLASSES)} static channels")
    if object_pred.shape[-1] != len(OBJECT_CLASSES) + 1:
        raise ShapeMismatchError(f"expected {len(OBJECT_CLASSES) + 1} object channels")
    if not keep.any():
        raise EmptyMaskError("evaluation mask excludes every cell")

    class_iou = {}
    for i, name in enumerate(STATIC_CLASSES):
        class_iou[name] = iou(static_pred[..., i] > 0.5, static_true[..., i] > 0.5, keep)
    for j, name in enumerate(OBJECT_CLASSES):
        class_iou[name] = iou(
            object_pred[..., j + 1] > 0.5, object_true[..., j + 1] > 0.5, keep
        )

    statics = [class_iou[n] for n in STATIC_CLASSES]
    everything = statics + [class_iou[n] for n in OBJECT_CLASSES]
    confusion = confusion_matrix(
        np.argmax(object_true, axis=-1), np.argmax(object_pred, axis=-1),
        len(OBJECT_CLASSES) + 1, keep,
    )
    return EvaluationReport(
        class_iou=class_iou,
        mean_static=float(np.mean(statics)),
        mean_overall=float(np.mean(everything)),
        confusion=confusion,
        cell_count=int(keep.sum()),
    )
