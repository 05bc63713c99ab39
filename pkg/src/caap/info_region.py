"""Saliency-guided protection of an informative time window during augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .transforms import (
    DEFAULT_SETTINGS,
    RngStream,
    TransformId,
    TransformSettings,
    apply_sequence,
)


@dataclass(frozen=True)
class RegionConfig:
    filter_len: int = 100
    thres: float = 60.0
    stride: int = 1

    def validate(self, length: int | None = None) -> None:
        if self.filter_len < 1 or self.stride < 1:
            raise ValueError("filter_len and stride must be >= 1")
        if not 0 <= self.thres <= 100:
            raise ValueError("thres is a percentile in [0, 100]")
        if length is not None and self.filter_len > length:
            raise ValueError(f"filter_len {self.filter_len} exceeds signal length {length}")


@dataclass(frozen=True)
class Region:
    start: int
    len: int
    score: float

    @property
    def stop(self) -> int:
        return self.start + self.len


def saliency(backbone: Backbone, x: np.ndarray, y) -> np.ndarray:
    """Per-time-step sum over channels of |d CE(x, y) / d x|.

    Accepts one signal (C, L) with an int label or a batch (N, C, L) with N
    labels; samples in a batch do not interact, so each row equals its
    single-sample saliency.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    xt = T.Tensor(xb, requires_grad=True)
    with T.frozen(backbone.params()):
        loss = T.cross_entropy(backbone(xt), yb, reduction="sum")
        (g,) = T.grad(loss, [xt])
    slc = np.abs(g).sum(axis=1)
    return slc[0] if single else slc


def region_score_array(slc: np.ndarray, cfg: RegionConfig) -> np.ndarray:
    slc = np.asarray(slc, dtype=np.float64)
    cfg.validate(slc.shape[-1])
    win = np.lib.stride_tricks.sliding_window_view(slc, cfg.filter_len, axis=-1)[..., :: cfg.stride, :]
    return win.mean(axis=-1)


def region_scores(slc: np.ndarray, cfg: RegionConfig) -> list[Region]:
    """One region per window start 0, stride, 2*stride, ... scored by the window mean."""
    scores = region_score_array(slc, cfg)
    return [Region(i * cfg.stride, cfg.filter_len, float(s)) for i, s in enumerate(scores)]


def select_region(regions: Sequence[Region], thres: float, gen: np.random.Generator) -> Region:
    """Uniform choice among regions scoring at or above the ``thres`` percentile."""
    if not regions:
        raise ValueError("no candidate regions")
    scores = np.array([r.score for r in regions])
    cut = np.percentile(scores, thres)
    idx = np.flatnonzero(scores >= cut)
    if idx.size == 0:
        idx = np.array([int(np.argmax(scores))])
    return regions[int(idx[gen.integers(idx.size)])]


def paste_back(x_orig: np.ndarray, x_aug: np.ndarray, region: Region) -> np.ndarray:
    """Copy columns [start, start+len) of the original into the augmented signal."""
    if x_orig.shape != x_aug.shape:
        raise ValueError(f"shape mismatch {x_orig.shape} vs {x_aug.shape}")
    if region.start < 0 or region.len < 1 or region.stop > x_orig.shape[-1]:
        raise ValueError(f"region [{region.start}, {region.stop}) out of bounds")
    out = np.array(x_aug, dtype=np.float64, copy=True)
    out[..., region.start : region.stop] = x_orig[..., region.start : region.stop]
    return out


def choose_region(slc: np.ndarray, cfg: RegionConfig, rng: RngStream) -> Region:
    return select_region(region_scores(slc, cfg), cfg.thres, rng.child("region").generator())


def augment_with_protection(
    backbone: Backbone | None,
    x: np.ndarray,
    y: int,
    ops: Sequence[tuple[TransformId, float]],
    cfg: RegionConfig,
    rng: RngStream,
    enabled: bool = True,
    settings: TransformSettings = DEFAULT_SETTINGS,
    slc: np.ndarray | None = None,
) -> np.ndarray:
    """Apply ``ops`` in sequence, then paste a salient window of ``x`` back.

    The region is chosen on the original signal, once per call. With
    ``enabled`` off this is plain sequential application.
    """
    out = apply_sequence(ops, x, rng, settings)
    if not enabled:
        return out
    if slc is None:
        slc = saliency(backbone, x, y)
    return paste_back(x, out, choose_region(slc, cfg, rng))


def augment_batch(
    backbone: Backbone,
    x: np.ndarray,
    y: np.ndarray,
    ops: Sequence[Sequence[tuple[TransformId, float]]],
    cfg: RegionConfig,
    rngs: Sequence[RngStream],
    enabled: bool = True,
    settings: TransformSettings = DEFAULT_SETTINGS,
) -> np.ndarray:
    """Batched :func:`augment_with_protection`; saliency runs once for the batch.

    Samples whose ops are all identity are returned unchanged without saliency.
    """
    out = np.array(x, dtype=np.float64, copy=True)
    active = [i for i, o in enumerate(ops) if any(t != TransformId.IDENTITY for t, _ in o)]
    if not active:
        return out
    slc = saliency(backbone, x[active], y[active]) if enabled else None
    for k, i in enumerate(active):
        out[i] = augment_with_protection(
            backbone, x[i], int(y[i]), ops[i], cfg, rngs[i], enabled, settings,
            slc=None if slc is None else slc[k],
        )
    return out


def protection_mask(backbone: Backbone, x: np.ndarray, y: np.ndarray, cfg: RegionConfig, rngs: Sequence[RngStream]) -> np.ndarray:
    """Boolean (N, L) mask of the selected region per sample."""
    slc = saliency(backbone, x, y)
    mask = np.zeros((x.shape[0], x.shape[-1]), dtype=bool)
    for i in range(x.shape[0]):
        r = choose_region(slc[i], cfg, rngs[i])
        mask[i, r.start : r.stop] = True
    return mask
