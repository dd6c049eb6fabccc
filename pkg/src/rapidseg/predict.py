"""Prediction-gated refinement and statistics reuse across levels (RAPID).

Superpixels found at the coarsest level are classified once, on entry to
level 2.  From then on only blocks of superpixels that touch a superpixel of
the opposite class are refined, and per-superpixel statistics are carried
down the pyramid arithmetically instead of being recomputed from pixels.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .energy import SuperpixelStats
from .engine import (
    ConfigurationError,
    LevelHooks,
    RunTrace,
    SegmentConfig,
    StageRunner,
    drive,
)
from .grid import BSQ, COL, CSQ, INIT, N, PSQ, PX, PY, Image, LabelMap, Pyramid
from .regularity import AdjacencyIndex


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    """Absolute and comparative brightness, intra- and extra-region dissimilarity."""

    absolute: float
    comparative: float
    intra: float
    extra: float

    def as_array(self) -> np.ndarray:
        return np.array([self.absolute, self.comparative, self.intra, self.extra])


@dataclass
class LinearModel:
    bias: float
    weights: tuple

    def __post_init__(self):
        self.bias = float(self.bias)
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != 4:
            raise ModelFormatError(f"expected 4 weights, got {len(self.weights)}")
        if not all(math.isfinite(v) for v in (self.bias, *self.weights)):
            raise ModelFormatError("model values must be finite")

    def decision(self, x) -> np.ndarray:
        return self.bias + np.asarray(x, dtype=np.float64) @ np.asarray(self.weights)

    def dumps(self) -> str:
        lines = [f"bias {self.bias!r}"]
        lines += [f"w{i} {w!r}" for i, w in enumerate(self.weights, start=1)]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "LinearModel":
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ModelFormatError(f"line {lineno}: expected '<key> <float>'")
            try:
                values[parts[0]] = float(parts[1])
            except ValueError:
                raise ModelFormatError(f"line {lineno}: {parts[1]!r} is not a float") from None
        missing = [k for k in ("bias", "w1", "w2", "w3", "w4") if k not in values]
        if missing:
            raise ModelFormatError(f"missing keys: {', '.join(missing)}")
        return cls(values["bias"], tuple(values[f"w{i}"] for i in range(1, 5)))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "LinearModel":
        return cls.loads(Path(path).read_text())


def train_threshold_model(img: Image, roi_mask: np.ndarray) -> LinearModel:
    """Fixture-only trainer: threshold mean brightness halfway between the ROI
    and background pixel means.  The weight sign follows whichever class is
    brighter."""
    bright = img.brightness()
    mask = np.asarray(roi_mask, dtype=bool)
    if mask.all() or not mask.any():
        raise ValueError("ROI mask needs both classes")
    roi, bg = bright[mask].mean(), bright[~mask].mean()
    thr = (roi + bg) / 2.0 / 255.0
    sign = 1.0 if roi >= bg else -1.0
    return LinearModel(-sign * thr, (sign, 0.0, 0.0, 0.0))


@dataclass
class PredictionMap:
    """Class (+1 ROI, -1 background) and boundary flag per superpixel id.

    ``y == 0`` marks ids without an alive superpixel.
    """

    y: np.ndarray
    flags: np.ndarray

    @property
    def ids(self) -> np.ndarray:
        return np.flatnonzero(self.y != 0)

    def roi_mask(self, labels: np.ndarray) -> np.ndarray:
        return self.y[labels] == 1

    def dumps(self) -> str:
        return "".join(f"{i} {int(self.y[i])} {int(self.flags[i])}\n" for i in self.ids)

    @classmethod
    def loads(cls, text: str, m: Optional[int] = None) -> "PredictionMap":
        rows = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ModelFormatError(f"line {lineno}: expected 'id y flag'")
            i, y, f = (int(p) for p in parts)
            if y not in (-1, 1) or f not in (0, 1):
                raise ModelFormatError(f"line {lineno}: y must be +-1 and flag 0/1")
            rows.append((i, y, f))
        size = m if m is not None else (max(r[0] for r in rows) + 1 if rows else 0)
        y = np.zeros(size, dtype=np.int8)
        flags = np.zeros(size, dtype=np.bool_)
        for i, yi, f in rows:
            y[i] = yi
            flags[i] = bool(f)
        return cls(y, flags)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path, m: Optional[int] = None) -> "PredictionMap":
        return cls.loads(Path(path).read_text(), m)


def _brightness_moments(stats: SuperpixelStats):
    n = stats.size.copy()
    n[n == 0] = 1.0
    mean = stats.color_sum.sum(axis=1) / stats.channels / n
    var = stats.table[:, BSQ] / stats.channels**2 / n - mean * mean
    return mean, np.maximum(var, 0.0)


def extract_all_features(stats: SuperpixelStats, adj: AdjacencyIndex, image_mean: float) -> np.ndarray:
    """Feature rows for every superpixel id (rows of dead ids are zero)."""
    mean, var = _brightness_moments(stats)
    feats = np.zeros((stats.m, 4))
    for sp in np.flatnonzero(stats.alive):
        nbrs = [n for n in adj.neighbors(sp) if stats.alive[n]]
        extra = float(np.mean(np.abs(mean[sp] - mean[nbrs]))) / 255.0 if nbrs else 0.0
        feats[sp] = (mean[sp] / 255.0, (mean[sp] - image_mean) / 255.0, var[sp] / 255.0**2, extra)
    return feats


def extract_features(sp: int, stats: SuperpixelStats, adj: AdjacencyIndex, image_mean: float) -> FeatureVector:
    mean, var = _brightness_moments(stats)
    nbrs = [n for n in adj.neighbors(sp) if stats.alive[n]]
    extra = float(np.mean(np.abs(mean[sp] - mean[nbrs]))) / 255.0 if nbrs else 0.0
    return FeatureVector(
        float(mean[sp] / 255.0),
        float((mean[sp] - image_mean) / 255.0),
        float(var[sp] / 255.0**2),
        extra,
    )


def classify(model: LinearModel, x) -> int:
    arr = x.as_array() if isinstance(x, FeatureVector) else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite feature vector {arr}")
    return 1 if float(model.decision(arr)) >= 0.0 else -1


def mark_boundary_superpixels(pred: PredictionMap, adj: AdjacencyIndex) -> PredictionMap:
    """Flag every superpixel adjacent to one with the opposite class."""
    flags = np.zeros_like(pred.flags)
    for (a, b) in adj.pairs():
        if pred.y[a] != 0 and pred.y[b] != 0 and pred.y[a] != pred.y[b]:
            flags[a] = True
            flags[b] = True
    return PredictionMap(pred.y.copy(), flags)


def predict_superpixels(
    img: Image, lm: LabelMap, stats: SuperpixelStats, model: LinearModel
) -> PredictionMap:
    adj = AdjacencyIndex.from_labels(lm.labels)
    feats = extract_all_features(stats, adj, float(img.brightness().mean()))
    y = np.zeros(stats.m, dtype=np.int8)
    alive = np.flatnonzero(stats.alive)
    if not np.all(np.isfinite(feats[alive])):
        raise ValueError("non-finite features")
    y[alive] = np.where(model.decision(feats[alive]) >= 0.0, 1, -1)
    return mark_boundary_superpixels(PredictionMap(y, np.zeros(stats.m, dtype=np.bool_)), adj)


def map_position(mu, ratio: int):
    """Mean position one level finer, 0-based coordinates: ``C * mu + (C - 1) / 2``."""
    return ratio * np.asarray(mu, dtype=np.float64) + (ratio - 1) / 2.0


def map_position_one_based(mu, ratio: int):
    """The same mapping written for 1-based coordinates: ``C * mu - (C - 1) / 2``."""
    return ratio * np.asarray(mu, dtype=np.float64) - (ratio - 1) / 2.0


def adapt_means(stats: SuperpixelStats, ratio: int) -> SuperpixelStats:
    """Carry statistics to the next finer level without touching pixels.

    Mean colors are kept, mean positions are mapped, counts and InitSize scale
    by C^2, and every sum is rebuilt as mean times the new count.  The
    squared-position sum uses the second moment of the C x C replication.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    if ratio == 1:
        return stats.copy()
    t = stats.table
    out = np.zeros_like(t)
    n = t[:, N]
    safe = np.where(n > 0, n, 1.0)
    scale = ratio * ratio
    n2 = n * scale
    out[:, N] = n2
    out[:, INIT] = t[:, INIT] * scale
    for c in [CSQ, BSQ] + list(range(COL, t.shape[1])):
        out[:, c] = t[:, c] / safe * n2
    mx, my = t[:, PX] / safe, t[:, PY] / safe
    out[:, PX] = map_position(mx, ratio) * n2
    out[:, PY] = map_position(my, ratio) * n2
    # E[(C x + j)^2] with j uniform over 0..C-1, summed over both axes
    ex2 = t[:, PSQ] / safe
    jm = (ratio - 1) / 2.0
    j2 = (ratio - 1) * (2 * ratio - 1) / 6.0
    out[:, PSQ] = (scale * ex2 + 2 * ratio * jm * (mx + my) + 2 * j2) * n2
    out[n == 0] = 0.0
    out[:, INIT] = t[:, INIT] * scale
    return SuperpixelStats(out, stats.alive.copy(), stats.channels)


def _adapt_hook(level, prev, grid, blab, ratio):
    return adapt_means(prev, ratio)


def rapid_hooks(model: Optional[LinearModel], holder: dict) -> LevelHooks:
    def predict(img1, lm1, stats):
        pred = predict_superpixels(img1, lm1, stats, model)
        holder["prediction"] = pred
        return pred.flags.copy()

    return LevelHooks(level_stats=_adapt_hook, predict=predict if model is not None else None)


def _rapid_config(config: SegmentConfig) -> SegmentConfig:
    return dataclasses.replace(config, params=dataclasses.replace(config.params, size_mode="merge"))


def final_prediction(holder: dict, stats: SuperpixelStats) -> PredictionMap:
    pred = holder.get("prediction")
    if pred is None:
        return PredictionMap(np.zeros(stats.m, dtype=np.int8), np.zeros(stats.m, dtype=np.bool_))
    y = np.where(stats.alive, pred.y, 0).astype(np.int8)
    return PredictionMap(y, pred.flags & stats.alive)


def run_rapid(
    pyr: Pyramid, config: SegmentConfig, model: Optional[LinearModel],
    trace: Optional[RunTrace] = None, runner: Optional[StageRunner] = None, hooks_extra=None,
) -> tuple[LabelMap, PredictionMap]:
    """Regularity-optimized coarse-to-fine refinement with prediction gating
    from level 2 on and statistics reuse across levels."""
    if pyr.level_count >= 2 and model is None:
        raise ConfigurationError("a linear model is required when the pyramid has 2 or more levels")
    holder: dict = {}
    hooks = rapid_hooks(model, holder)
    if hooks_extra is not None:
        hooks = hooks_extra(hooks)
    state, lm, _ = drive(pyr, _rapid_config(config), hooks, runner=runner, trace=trace)
    return lm, final_prediction(holder, state.stats)
