"""Accuracy, recall and the paired sample-wise bias metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Predictions:
    """Prediction records for one run: sample ids, true labels, predicted labels."""

    ids: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray

    def __post_init__(self):
        for name in ("ids", "y_true", "y_pred"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if not (self.ids.shape == self.y_true.shape == self.y_pred.shape):
            raise ValueError("ids, y_true and y_pred must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    def sorted(self) -> "Predictions":
        order = np.argsort(self.ids, kind="stable")
        return Predictions(self.ids[order], self.y_true[order], self.y_pred[order])


def accuracy(preds: Predictions) -> float:
    if len(preds) == 0:
        raise ValueError("accuracy of an empty prediction list")
    return float(np.mean(preds.y_true == preds.y_pred))


def class_recall(preds: Predictions, num_classes: int) -> np.ndarray:
    """Per-class recall; NaN for classes absent from ``preds``."""
    if np.any(preds.y_true >= num_classes) or np.any(preds.y_pred >= num_classes):
        raise ValueError("class index out of range")
    total = np.bincount(preds.y_true, minlength=num_classes)
    hit = np.bincount(preds.y_true[preds.y_true == preds.y_pred], minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, hit / np.maximum(total, 1), np.nan)


def macro_recall(preds: Predictions, num_classes: int) -> float:
    """Mean recall over classes present in ``preds``."""
    return float(np.nanmean(class_recall(preds, num_classes)))


@dataclass(frozen=True)
class BiasConfusion:
    """Per-class counts pairing a no-augmentation run with an augmented run."""

    stp: np.ndarray  # both correct
    sfp: np.ndarray  # wrong without augmentation, correct with it
    sfn: np.ndarray  # correct without augmentation, wrong with it
    stn: np.ndarray  # both wrong

    @property
    def totals(self) -> np.ndarray:
        return self.stp + self.sfp + self.sfn + self.stn


def bias_confusion(preds_noaug: Predictions, preds_aug: Predictions, num_classes: int) -> BiasConfusion:
    a, b = preds_noaug.sorted(), preds_aug.sorted()
    if not np.array_equal(a.ids, b.ids):
        raise ValueError("paired runs must cover identical sample ids")
    if not np.array_equal(a.y_true, b.y_true):
        raise ValueError("paired runs disagree on true labels")
    ok0 = a.y_true == a.y_pred
    ok1 = b.y_true == b.y_pred

    def count(mask):
        return np.bincount(a.y_true[mask], minlength=num_classes).astype(np.int64)

    return BiasConfusion(count(ok0 & ok1), count(~ok0 & ok1), count(ok0 & ~ok1), count(~ok0 & ~ok1))


@dataclass(frozen=True)
class SwiseMetrics:
    improve: np.ndarray
    bias: np.ndarray
    gain: np.ndarray
    macro_improve: float
    macro_bias: float
    macro_gain: float


def swise_metrics(bc: BiasConfusion) -> SwiseMetrics:
    """Per-class improve = SFP/n, bias = SFN/n, gain = improve - bias; macro over present classes."""
    n = bc.totals
    present = n > 0
    denom = np.maximum(n, 1)
    improve = np.where(present, bc.sfp / denom, np.nan)
    bias = np.where(present, bc.sfn / denom, np.nan)
    gain = improve - bias
    if not present.any():
        raise ValueError("no class has any samples")
    return SwiseMetrics(
        improve, bias, gain,
        float(np.mean(improve[present])),
        float(np.mean(bias[present])),
        float(np.mean(gain[present])),
    )
