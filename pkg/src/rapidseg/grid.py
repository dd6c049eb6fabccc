"""Pixel substrate: images, pyramids, grid initialization, blocks, label mapping.

Coordinates are 0-based everywhere, ``x`` is the column and ``y`` the row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm

# Column layout shared by block aggregates and superpixel statistics.  Block rows
# and superpixel rows use the same layout so a relabel is a row add/subtract.
N = 0  # pixel count
CSQ = 1  # sum over pixels and channels of I^2
BSQ = 2  # sum over pixels of (channel sum)^2, integer-valued
PX = 3  # sum of x
PY = 4  # sum of y
PSQ = 5  # sum of x^2 + y^2
INIT = 6  # InitSize (statistics only; always 0 in block rows)
COL = 7  # first color-sum column, one per channel


class DimensionError(ValueError):
    pass


class InitializationError(ValueError):
    pass


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    """Raster with 1 (gray) or 3 (RGB) channels, ``data`` shaped (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise DimensionError(f"image must be HxWx1 or HxWx3, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError("image must be at least 1x1")
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def brightness(self) -> np.ndarray:
        """Per-pixel channel mean as float64, shape (height, width)."""
        return self.data.astype(np.float64).mean(axis=2)


def load_image(path: str | Path) -> Image:
    return Image(netpbm.read_netpbm(path))


def save_image(path: str | Path, img: Image) -> None:
    netpbm.write_netpbm(path, img.data)


@dataclass(frozen=True)
class Pyramid:
    """Resolution stack; ``levels[0]`` is the coarsest and ``levels[-1]`` the input."""

    levels: tuple[Image, ...]
    ratio: int

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def level(self, k: int) -> Image:
        """1-based level accessor, level 1 is the coarsest."""
        return self.levels[k - 1]


def _fold_starts(length: int, ratio: int) -> np.ndarray:
    return np.arange(length // ratio, dtype=np.intp) * ratio


def downsample(img: Image, ratio: int) -> Image:
    """Box-mean downsample; remainder rows/columns fold into the last coarse pixel."""
    h, w = img.height // ratio, img.width // ratio
    if h < 1 or w < 1:
        raise DimensionError(
            f"ratio {ratio} turns a {img.width}x{img.height} level into {w}x{h}"
        )
    if ratio == 1:
        return img
    src = img.data.astype(np.int64)
    rows = _fold_starts(img.height, ratio)
    cols = _fold_starts(img.width, ratio)
    sums = np.add.reduceat(np.add.reduceat(src, rows, axis=0), cols, axis=1)
    rh = np.diff(np.append(rows, img.height))
    cw = np.diff(np.append(cols, img.width))
    counts = (rh[:, None] * cw[None, :])[:, :, None]
    # round half up in integer arithmetic
    return Image(((2 * sums + counts) // (2 * counts)).astype(np.uint8))


def build_pyramid(img: Image, ratio: int, levels: int) -> Pyramid:
    if ratio < 1 or levels < 1:
        raise DimensionError(f"need ratio >= 1 and levels >= 1, got C={ratio}, L={levels}")
    stack = [img]
    for _ in range(levels - 1):
        stack.append(downsample(stack[-1], ratio))
    return Pyramid(levels=tuple(reversed(stack)), ratio=ratio)


@dataclass
class LabelMap:
    """Per-pixel (or per-block) superpixel ids in ``[0, m)``, shape (height, width)."""

    labels: np.ndarray
    m: int

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.m)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(netpbm.encode_rlbl(self.labels, self.m))

    @classmethod
    def load(cls, path: str | Path) -> "LabelMap":
        labels, m = netpbm.decode_rlbl(Path(path).read_bytes())
        return cls(labels, m)


def choose_tiling(width: int, height: int, m: int) -> tuple[int, int]:
    """Pick ``rows x cols == m`` whose cells are closest to square; ties take fewer rows."""
    best = None
    for r in range(1, m + 1):
        if m % r:
            continue
        c = m // r
        if r > height or c > width:
            continue
        skew = abs(math.log((width / c) / (height / r)))
        if best is None or skew < best[0] - 1e-12:
            best = (skew, r, c)
    if best is None:
        raise InitializationError(f"M={m} has no rows x cols tiling that fits {width}x{height}")
    return best[1], best[2]


def _split(length: int, parts: int) -> np.ndarray:
    """Cell index per coordinate; the first ``length % parts`` cells are one longer."""
    base, extra = divmod(length, parts)
    sizes = np.full(parts, base, dtype=np.intp)
    sizes[:extra] += 1
    return np.repeat(np.arange(parts, dtype=np.int32), sizes)


def init_grid_labels(width: int, height: int, m: int) -> LabelMap:
    if m < 1 or m > width * height:
        raise InitializationError(f"M={m} must lie in [1, {width * height}]")
    r, c = choose_tiling(width, height, m)
    rows = _split(height, r)
    cols = _split(width, c)
    return LabelMap(rows[:, None] * c + cols[None, :], m)


def upsample_labels(lm: LabelMap, ratio: int, target_w: int, target_h: int) -> LabelMap:
    """Fine pixel (x, y) takes coarse label (x div C, y div C), clamped to the last column/row.

    Both the ceiling and the folded (floor) coarse sizes are accepted.
    """
    for name, coarse, fine in (("width", lm.width, target_w), ("height", lm.height, target_h)):
        if coarse not in (-(-fine // ratio), max(fine // ratio, 1)):
            raise MappingError(
                f"{name}: coarse {coarse} does not map onto {fine} with ratio {ratio}"
            )
    ys = np.minimum(np.arange(target_h) // ratio, lm.height - 1)
    xs = np.minimum(np.arange(target_w) // ratio, lm.width - 1)
    return LabelMap(lm.labels[ys[:, None], xs[None, :]], lm.m)


def block_sum(arr: np.ndarray, b: int) -> np.ndarray:
    """Sum a 2-D array over ``b x b`` tiles; edge tiles are smaller."""
    if b == 1:
        return arr
    rows = np.arange(0, arr.shape[0], b)
    cols = np.arange(0, arr.shape[1], b)
    return np.add.reduceat(np.add.reduceat(arr, rows, axis=0), cols, axis=1)


def pixel_features(img: Image):
    """Yield ``(column, per-pixel values)`` for every statistics column except INIT."""
    data = img.data.astype(np.float64)
    h, w = img.height, img.width
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    yield N, np.ones((h, w))
    yield CSQ, (data * data).sum(axis=2)
    chsum = data.sum(axis=2)
    yield BSQ, chsum * chsum
    del chsum
    yield PX, np.broadcast_to(xs, (h, w))
    yield PY, np.broadcast_to(ys, (h, w))
    yield PSQ, xs * xs + ys * ys
    for c in range(img.channels):
        yield COL + c, data[:, :, c]


@dataclass
class BlockGrid:
    """Aggregates of ``b x b`` pixel blocks over one image.

    ``agg`` has one row per block (row-major over the block grid) in the shared
    column layout: count, squared-color sum, squared-brightness sum, position
    sums, squared-position sum, then per-channel color sums.
    """

    b: int
    width: int
    height: int
    channels: int
    agg: np.ndarray

    @property
    def rows(self) -> int:
        return -(-self.height // self.b)

    @property
    def cols(self) -> int:
        return -(-self.width // self.b)

    def _field(self, col):
        return self.agg[:, col].reshape(self.rows, self.cols)

    @property
    def pixel_count(self) -> np.ndarray:
        return self._field(N)

    @property
    def color_sum(self) -> np.ndarray:
        return self.agg[:, COL : COL + self.channels].reshape(self.rows, self.cols, self.channels)

    @property
    def color_sq_sum(self) -> np.ndarray:
        return self._field(CSQ)

    @property
    def position_sum(self) -> np.ndarray:
        return self.agg[:, PX : PY + 1].reshape(self.rows, self.cols, 2)

    @property
    def position_sq_sum(self) -> np.ndarray:
        return self._field(PSQ)

    def index(self, bx: int, by: int) -> int:
        return by * self.cols + bx

    def block_shape(self, bx: int, by: int) -> tuple[int, int]:
        """Pixel (width, height) of a block; edge blocks may be smaller."""
        return min(self.b, self.width - bx * self.b), min(self.b, self.height - by * self.b)


def block_aggregate(img: Image, b: int) -> BlockGrid:
    if b < 1:
        raise DimensionError(f"block size must be >= 1, got {b}")
    rows, cols = -(-img.height // b), -(-img.width // b)
    agg = np.zeros((rows * cols, COL + img.channels))
    for c, f in pixel_features(img):
        agg[:, c] = block_sum(f, b).ravel()
    return BlockGrid(b=b, width=img.width, height=img.height, channels=img.channels, agg=agg)


def expand_block_labels(blab: np.ndarray, b: int, width: int, height: int) -> np.ndarray:
    """Pixel labels from block labels at block size ``b``."""
    if b == 1:
        return blab.copy()
    ys = np.arange(height) // b
    xs = np.arange(width) // b
    return blab[ys[:, None], xs[None, :]]


def sample_block_labels(pixel_labels: np.ndarray, b: int) -> np.ndarray:
    """Block labels read from the top-left pixel of every ``b x b`` block."""
    return np.ascontiguousarray(pixel_labels[::b, ::b])
