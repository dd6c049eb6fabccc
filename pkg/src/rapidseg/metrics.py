"""Segmentation quality metrics: under-segmentation error, boundary recall,
and pixelwise ROI precision / recall / F1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .grid import DimensionError


@dataclass(frozen=True)
class GroundTruth:
    """A per-pixel segment id map, or a binary ROI mask (``is_mask``)."""

    labels: np.ndarray
    is_mask: bool = False

    @classmethod
    def from_array(cls, arr: np.ndarray, kind: str = "auto") -> "GroundTruth":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise DimensionError(f"ground truth must be 2-D, got shape {arr.shape}")
        if kind not in ("auto", "segments", "mask"):
            raise ValueError(f"kind must be auto, segments or mask, got {kind!r}")
        values = np.unique(arr)
        if kind == "mask" or (kind == "auto" and np.isin(values, (0, 255)).all() and 255 in values):
            return cls((arr > 0).astype(np.int32), True)
        _, dense = np.unique(arr, return_inverse=True)
        return cls(dense.reshape(arr.shape).astype(np.int32), False)

    @property
    def shape(self) -> tuple:
        return self.labels.shape


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: labels {a.shape} vs ground truth {b.shape}")


def _contingency(labels: np.ndarray, gt: np.ndarray):
    """Nonzero cells of the superpixel x segment overlap table."""
    sp = labels.ravel().astype(np.int64)
    seg = gt.ravel().astype(np.int64)
    key = sp * (int(seg.max()) + 1) + seg
    cells, counts = np.unique(key, return_counts=True)
    sp_of_cell = cells // (int(seg.max()) + 1)
    sp_size = np.bincount(sp)
    return counts, sp_size[sp_of_cell]


def under_segmentation_error(labels: np.ndarray, gt: np.ndarray, classic: bool = False) -> float:
    """Fraction of pixels leaking across ground-truth segments.

    The default counts, for every overlap of superpixel and segment, the
    smaller of the inside and outside parts.  ``classic=True`` gives
    ``(sum over overlaps of |sp| - N) / N``.
    """
    labels = np.asarray(labels)
    gt = np.asarray(gt)
    _check_dims(labels, gt)
    n = labels.size
    inside, sp_size = _contingency(labels, gt)
    if classic:
        return float((sp_size.sum() - n) / n)
    return float(np.minimum(inside, sp_size - inside).sum() / n)


def boundary_map(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbor carrying a different label (both sides of every edge)."""
    out = np.zeros(labels.shape, dtype=bool)
    dx = labels[:, 1:] != labels[:, :-1]
    dy = labels[1:, :] != labels[:-1, :]
    out[:, 1:] |= dx
    out[:, :-1] |= dx
    out[1:, :] |= dy
    out[:-1, :] |= dy
    return out


def boundary_recall(labels: np.ndarray, gt: np.ndarray, eps: int = 2) -> float:
    """Share of ground-truth boundary pixels with a superpixel boundary pixel
    within Chebyshev distance ``eps``.  1.0 when the ground truth has no boundary."""
    labels = np.asarray(labels)
    gt = np.asarray(gt)
    _check_dims(labels, gt)
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    gb = boundary_map(gt)
    total = int(gb.sum())
    if total == 0:
        return 1.0
    sb = boundary_map(labels)
    if eps > 0:
        sb = ndimage.maximum_filter(sb, size=2 * int(eps) + 1, mode="constant", cval=False)
    return float((gb & sb).sum() / total)


@dataclass(frozen=True)
class Detection:
    """Pixelwise detection scores; None marks an undefined ratio."""

    precision: Optional[float]
    recall: Optional[float]
    f1: float


def roi_precision_f1(pred: np.ndarray, gt_mask: np.ndarray) -> Detection:
    pred = np.asarray(pred, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    _check_dims(pred, gt_mask)
    tp = int((pred & gt_mask).sum())
    fp = int((pred & ~gt_mask).sum())
    fn = int((~pred & gt_mask).sum())
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Detection(precision, recall, f1)
