"""Synthetic images with known ground truth, shared by the test modules."""

from __future__ import annotations

import numpy as np

from rapidseg.grid import Image


def noisy(gt: np.ndarray, lo: float, hi: float, sigma: float, rng) -> np.ndarray:
    img = np.where(gt, hi, lo) + rng.normal(0.0, sigma, gt.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def two_tone(h: int, w: int, edge: int, lo=0, hi=200) -> tuple:
    """Left columns ``< edge`` at ``lo``, the rest at ``hi``; no noise."""
    gt = np.zeros((h, w), dtype=np.int32)
    gt[:, edge:] = 1
    return Image(np.where(gt == 1, hi, lo).astype(np.uint8)), gt


def disk(size: int, seed: int, sigma: float = 15.0, lo=70, hi=170) -> tuple:
    """Bright disk (the ROI) on a dark background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    r = size * rng.uniform(0.15, 0.25)
    gt = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
    return Image(noisy(gt, lo, hi, sigma, rng)), gt


TWO_REGION_KINDS = ("vertical", "slanted", "wave", "stripe", "disk")


def two_region(kind: str, seed: int, size: int = 128) -> tuple:
    """One connected region and its complement, with moderate noise."""
    rng = np.random.default_rng(1000 + seed)
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "vertical":
        gt = xx >= rng.integers(size // 4, 3 * size // 4)
    elif kind == "slanted":
        gt = yy > rng.uniform(-0.8, 0.8) * (xx - size / 2) + rng.uniform(0.35, 0.65) * size
    elif kind == "wave":
        gt = yy > np.sin(xx / 9.0 + rng.uniform(0, 6)) * size / 10 + size / 2
    elif kind == "stripe":
        gt = np.abs(xx - rng.integers(size // 4, 3 * size // 4)) < rng.integers(3, 7)
    elif kind == "disk":
        cy, cx = rng.uniform(0.35, 0.65, 2) * size
        gt = (yy - cy) ** 2 + (xx - cx) ** 2 < (rng.uniform(0.1, 0.25) * size) ** 2
    else:
        raise ValueError(kind)
    lo = rng.uniform(40, 100)
    img = noisy(gt, lo, lo + rng.uniform(80, 120), 12.0, rng)
    return Image(img), gt.astype(np.int32)


def random_image(h: int, w: int, seed: int, channels: int = 1, smooth: bool = True) -> Image:
    """Piecewise-constant random patches plus noise."""
    rng = np.random.default_rng(seed)
    if smooth:
        cells = rng.integers(0, 256, (max(h // 8, 1) + 1, max(w // 8, 1) + 1, channels))
        base = np.repeat(np.repeat(cells, 8, axis=0), 8, axis=1)[:h, :w].astype(float)
    else:
        base = rng.uniform(0, 255, (h, w, channels))
    return Image(np.clip(base + rng.normal(0, 10, base.shape), 0, 255).astype(np.uint8))
