"""Class-dependent regulation: blend inferred policies toward no augmentation.

Classes that the search-phase model recognises poorly receive more
no-augmentation mass at train time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .transforms import TransformId


@dataclass
class RegulationState:
    alpha: float = 0.5
    class_recall: np.ndarray = field(default_factory=lambda: np.zeros(0))
    w_noaug: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_recall(cls, class_recall, alpha: float = 0.5) -> "RegulationState":
        recall = np.asarray(class_recall, dtype=np.float64)
        return cls(alpha, recall, compute_noaug_weights(recall, alpha))


def compute_noaug_weights(class_recall, alpha: float) -> np.ndarray:
    """W[c] = clamp(alpha * (1 - recall[c]), 0, 1)."""
    recall = np.asarray(class_recall, dtype=np.float64)
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if np.any(recall < 0) or np.any(recall > 1):
        raise ValueError("recall entries must lie in [0, 1]")
    return np.clip(alpha * (1.0 - recall), 0.0, 1.0)


def noaug_distribution(transforms: Sequence[TransformId]) -> np.ndarray:
    """One-hot probability vector on the identity transform."""
    transforms = [TransformId(t) for t in transforms]
    if TransformId.IDENTITY not in transforms:
        raise ValueError("transform set has no identity transform to act as no-augmentation")
    out = np.zeros(len(transforms))
    out[transforms.index(TransformId.IDENTITY)] = 1.0
    return out


def blend_policy(p_old: np.ndarray, w, p_noaug: np.ndarray) -> np.ndarray:
    """(1 - w) * p_old + w * p_noaug; ``w`` may be a scalar or one weight per row."""
    p_old = np.asarray(p_old, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("blend weight must lie in [0, 1]")
    if w.ndim == 1 and p_old.ndim == 2:
        w = w[:, None]
    return (1.0 - w) * p_old + w * np.asarray(p_noaug, dtype=np.float64)


def regulate(p: np.ndarray, labels: np.ndarray, state: RegulationState, transforms: Sequence[TransformId]) -> np.ndarray:
    """Apply each sample's class weight to its probability row."""
    return blend_policy(p, state.w_noaug[np.asarray(labels)], noaug_distribution(transforms))
