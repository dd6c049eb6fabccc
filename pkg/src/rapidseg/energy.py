"""Superpixel energy: per-term evaluation, move deltas, topology gate, oracle.

The energy of a labeling is

    sum_p |I(p) - c_s(p)|^2 / color_norm^2
  + lambda_pos * sum_p |p - mu_s(p)|^2 / pos_norm^2
  + lambda_b * sum_p sum_{q in N4(p)} [s(p) != s(q)]

plus the topology and size constraints, which are reported as violations
rather than as infinite values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels as K
from .grid import BSQ, COL, CSQ, INIT, N, PSQ, PX, PY, BlockGrid, Image, LabelMap, block_aggregate

SIZE_MODES = ("hard-quarter", "merge", "none")
_MODE_CODES = {"none": K.MODE_NONE, "hard-quarter": K.MODE_HARD, "merge": K.MODE_MERGE}


class IntegrityError(RuntimeError):
    """Maintained statistics disagree with a recomputation from pixels."""


class GateRejected(Exception):
    """A move would shrink a superpixel below the hard size floor."""


@dataclass
class EnergyParams:
    lambda_pos: float = 0.1
    lambda_b: float = 0.01
    size_mode: str = "hard-quarter"
    l: float = 0.25
    u: float = 1.5
    color_norm: float = 255.0
    pos_norm: float = 1.0
    eps: float = 1e-12

    def __post_init__(self):
        if self.size_mode not in SIZE_MODES:
            raise ValueError(f"size_mode must be one of {SIZE_MODES}, got {self.size_mode!r}")
        if self.lambda_pos < 0 or self.lambda_b < 0:
            raise ValueError("lambda_pos and lambda_b must be >= 0")
        if not (0 < self.l < 1 < self.u):
            raise ValueError(f"need 0 < l < 1 < u, got l={self.l}, u={self.u}")

    def with_pos_norm(self, init_size: float) -> "EnergyParams":
        """Copy with ``pos_norm = sqrt(init_size)``."""
        return EnergyParams(
            self.lambda_pos, self.lambda_b, self.size_mode, self.l, self.u,
            self.color_norm, float(np.sqrt(init_size)), self.eps,
        )

    def vector(self, workers: int = 1) -> np.ndarray:
        p = np.zeros(K.N_PARAMS)
        p[K.P_ICN2] = 1.0 / self.color_norm**2
        p[K.P_IPN2] = 1.0 / self.pos_norm**2
        p[K.P_LPOS] = self.lambda_pos
        p[K.P_LB] = self.lambda_b
        p[K.P_MODE] = _MODE_CODES[self.size_mode]
        p[K.P_LO] = self.l
        p[K.P_UP] = self.u
        p[K.P_WORKERS] = workers
        p[K.P_EPS] = self.eps
        return p


@dataclass
class SuperpixelStats:
    """Running sums per superpixel in the shared column layout.

    ``table[i]`` holds count, squared sums, position sums, InitSize and
    per-channel color sums of superpixel i.  Means are derived on demand so
    they can never drift away from the sums.
    """

    table: np.ndarray
    alive: np.ndarray
    channels: int

    @classmethod
    def empty(cls, m: int, channels: int) -> "SuperpixelStats":
        return cls(np.zeros((m, COL + channels)), np.ones(m, dtype=np.bool_), channels)

    @classmethod
    def from_blocks(cls, blab: np.ndarray, grid: BlockGrid, m: int, init_size=None) -> "SuperpixelStats":
        st = cls.empty(m, grid.channels)
        K.accumulate_stats(blab, grid.agg, st.table, 0, blab.shape[0])
        st.table[:, INIT] = st.table[:, N] if init_size is None else init_size
        st.alive = st.table[:, N] > 0
        return st

    @classmethod
    def from_pixels(cls, img: Image, lm: LabelMap, init_size=None) -> "SuperpixelStats":
        return cls.from_blocks(lm.labels, block_aggregate(img, 1), lm.m, init_size)

    def copy(self) -> "SuperpixelStats":
        return SuperpixelStats(self.table.copy(), self.alive.copy(), self.channels)

    @property
    def m(self) -> int:
        return self.table.shape[0]

    @property
    def size(self) -> np.ndarray:
        return self.table[:, N]

    @property
    def init_size(self) -> np.ndarray:
        return self.table[:, INIT]

    @property
    def color_sum(self) -> np.ndarray:
        return self.table[:, COL : COL + self.channels]

    @property
    def position_sum(self) -> np.ndarray:
        return self.table[:, PX : PY + 1]

    @property
    def color_sq_sum(self) -> np.ndarray:
        return self.table[:, CSQ]

    @property
    def brightness_sq_sum(self) -> np.ndarray:
        """Sum over pixels of squared brightness (channel mean)."""
        return self.table[:, BSQ] / self.channels**2

    def _safe_n(self):
        n = self.size.copy()
        n[n == 0] = 1.0
        return n

    @property
    def mean_color(self) -> np.ndarray:
        return self.color_sum / self._safe_n()[:, None]

    @property
    def mean_position(self) -> np.ndarray:
        return self.position_sum / self._safe_n()[:, None]

    @property
    def mean_brightness(self) -> np.ndarray:
        return self.color_sum.sum(axis=1) / self.channels / self._safe_n()

    def check(self, other: "SuperpixelStats", rtol: float = 1e-9) -> None:
        cols = [c for c in range(self.table.shape[1]) if c != INIT]
        a = self.table[:, cols]
        b = other.table[:, cols]
        scale = np.maximum(np.abs(a), np.abs(b)).max(initial=1.0)
        bad = np.abs(a - b) > rtol * scale
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise IntegrityError(
                f"superpixel {i} column {cols[j]}: maintained {a[i, j]!r} vs recomputed {b[i, j]!r}"
            )


@dataclass
class MoveDelta:
    d_color: float
    d_pos: float
    d_boundary: float
    total: float


def _block_row(grid: BlockGrid, block_pos) -> np.ndarray:
    bx, by = block_pos
    return grid.agg[grid.index(bx, by)]


def color_energy(block: np.ndarray, stats: SuperpixelStats, target: int) -> float:
    """sum over the block's pixels of |I - c_target|^2, from aggregates."""
    n = block[N]
    if n == 0:
        return 0.0
    c = stats.mean_color[target]
    return float(block[CSQ] - 2.0 * c @ block[COL : COL + stats.channels] + n * c @ c)


def position_energy(block: np.ndarray, stats: SuperpixelStats, target: int) -> float:
    n = block[N]
    if n == 0:
        return 0.0
    mu = stats.mean_position[target]
    return float(block[PSQ] - 2.0 * mu @ block[PX : PY + 1] + n * mu @ mu)


def boundary_delta(blab: np.ndarray, grid: BlockGrid, block_pos, from_label: int, to_label: int) -> float:
    bx, by = block_pos
    return float(K.boundary_delta(blab, bx, by, from_label, to_label, grid.b, grid.width, grid.height))


def is_connectivity_safe(blab: np.ndarray, block_pos, from_label: int) -> bool:
    bx, by = block_pos
    return bool(K.ring_safe(blab, bx, by, from_label))


def move_delta(
    blab: np.ndarray, grid: BlockGrid, block_pos, from_label: int, to_label: int,
    stats: SuperpixelStats, params: EnergyParams,
) -> MoveDelta:
    """Score relabeling one block with frozen (current) means.

    Raises :class:`GateRejected` when hard-quarter mode forbids shrinking
    ``from_label`` by this block.
    """
    if from_label == to_label:
        return MoveDelta(0.0, 0.0, 0.0, 0.0)
    row = _block_row(grid, block_pos)
    if params.size_mode == "hard-quarter":
        if stats.size[from_label] - row[N] < stats.init_size[from_label] / 4:
            raise GateRejected(f"superpixel {from_label} would drop below InitSize/4")
    d_col = color_energy(row, stats, to_label) - color_energy(row, stats, from_label)
    d_pos = position_energy(row, stats, to_label) - position_energy(row, stats, from_label)
    d_b = boundary_delta(blab, grid, block_pos, from_label, to_label)
    total = d_col / params.color_norm**2 + params.lambda_pos * d_pos / params.pos_norm**2 + params.lambda_b * d_b
    return MoveDelta(d_col, d_pos, d_b, total)


def apply_move(blab: np.ndarray, grid: BlockGrid, block_pos, from_label: int, to_label: int, stats: SuperpixelStats) -> None:
    bx, by = block_pos
    if blab[by, bx] != from_label:
        raise ValueError(f"block {block_pos} is labeled {blab[by, bx]}, not {from_label}")
    blab[by, bx] = to_label
    K.move_row(grid.agg, grid.index(bx, by), stats.table, stats.table, False, from_label, to_label)


_N4 = ndimage.generate_binary_structure(2, 1)


def count_components(labels: np.ndarray) -> int:
    """Number of 4-connected components, summed over all labels present."""
    total = 0
    for lab, sl in enumerate(ndimage.find_objects(labels.astype(np.int64) + 1)):
        if sl is not None:
            total += ndimage.label(labels[sl] == lab, structure=_N4)[1]
    return total


def is_topology_valid(labels: np.ndarray, alive=None) -> bool:
    """Every present label is one 4-connected region; with ``alive``, the
    present labels must also be exactly the alive ones."""
    present = np.unique(labels)
    if alive is not None and not np.array_equal(np.flatnonzero(alive), present):
        return False
    return count_components(labels) == present.size


@dataclass
class EnergyReport:
    color: float
    position: float
    boundary: float
    total: float
    violations: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations


def total_energy(
    img: Image, lm: LabelMap, stats: SuperpixelStats, params: EnergyParams, check: bool = True
) -> EnergyReport:
    """Full O(N) evaluation of the energy with the means currently held in ``stats``."""
    labels = lm.labels
    if check:
        stats.check(SuperpixelStats.from_pixels(img, lm))
    data = img.data.astype(np.float64)
    c = stats.mean_color[labels]
    e_col = float(((data - c) ** 2).sum())
    h, w = labels.shape
    ys, xs = np.mgrid[0:h, 0:w]
    mu = stats.mean_position[labels]
    e_pos = float(((xs - mu[..., 0]) ** 2 + (ys - mu[..., 1]) ** 2).sum())
    e_b = 2.0 * float((labels[:, 1:] != labels[:, :-1]).sum() + (labels[1:, :] != labels[:-1, :]).sum())
    total = e_col / params.color_norm**2 + params.lambda_pos * e_pos / params.pos_norm**2 + params.lambda_b * e_b
    violations = []
    if not is_topology_valid(labels):
        violations.append("topology")
    if params.size_mode == "hard-quarter":
        present = np.unique(labels)
        sizes = np.bincount(labels.ravel(), minlength=lm.m)
        if np.any(sizes[present] < stats.init_size[present] / 4):
            violations.append("size")
    return EnergyReport(e_col, e_pos, e_b, total, violations)
