"""Serial coarse-to-fine refinement engines (single level and multi-scale).

A run walks a list of levels (coarsest first); every level walks a list of
block sizes.  At each stage the label map lives on the block grid, boundary
blocks are queued, and the queue is drained with the frozen-mean relabeling rule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .energy import EnergyParams, IntegrityError, SuperpixelStats, is_topology_valid
from .grid import (
    INIT,
    BlockGrid,
    Image,
    InitializationError,
    LabelMap,
    Pyramid,
    block_aggregate,
    choose_tiling,
    expand_block_labels,
    init_grid_labels,
    sample_block_labels,
    upsample_labels,
)


class ConfigurationError(ValueError):
    pass


@dataclass
class StageSchedule:
    """Block sizes per level, ``levels[i] = (level index, [b1 > b2 > ...])``."""

    levels: list
    final_grain: int = 1

    def __post_init__(self):
        for lvl, sizes in self.levels:
            for prev, cur in zip(sizes, sizes[1:]):
                if cur >= prev or prev % cur:
                    raise ConfigurationError(
                        f"level {lvl}: block sizes {sizes} must strictly decrease and divide"
                    )

    def sizes(self, level: int) -> list:
        for lvl, sizes in self.levels:
            if lvl == level:
                return list(sizes)
        raise ConfigurationError(f"schedule has no entry for level {level}")


def default_chain(width: int, height: int) -> list:
    return [8, 4, 2, 1] if width * height > 1024 * 1024 else [4, 2, 1]


def default_schedule(dims: list, ratio: int, final_grain: int = 1, chain=None) -> StageSchedule:
    """Per-level block sizes.

    Finer levels inherit labels that are constant on ``ratio * g`` pixel
    cells (``g`` the previous level's last block size), so their first block
    size must divide that.
    """
    if final_grain not in (1, 4):
        raise ConfigurationError(f"final_grain must be 1 or 4, got {final_grain}")
    levels = []
    prev_last = None
    for i, (w, h) in enumerate(dims, start=1):
        base = list(chain) if chain is not None else default_chain(w, h)
        sizes = [b for b in base if b >= final_grain]
        if prev_last is not None:
            cell = ratio * prev_last
            sizes = [b for b in sizes if cell % b == 0]
        levels.append((i, sizes))
        if sizes:
            prev_last = sizes[-1]
        elif prev_last is not None:
            prev_last = ratio * prev_last
    return StageSchedule(levels, final_grain)


@dataclass
class SegmentConfig:
    m: int = 256
    params: EnergyParams = field(default_factory=EnergyParams)
    schedule: Optional[StageSchedule] = None
    final_grain: int = 1
    chain: Optional[list] = None
    check_integrity: bool = False
    move_ceiling: float = 50.0
    observer: Optional[Callable] = None

    def __post_init__(self):
        if self.m < 1:
            raise ConfigurationError(f"m must be >= 1, got {self.m}")
        if self.final_grain not in (1, 4):
            raise ConfigurationError(f"final_grain must be 1 or 4, got {self.final_grain}")


@dataclass
class StageTrace:
    level: int
    b: int
    seeded: int = 0
    popped: int = 0
    accepted: int = 0
    merges: int = 0
    gate_rejects: int = 0
    merge_rejects: int = 0
    unsafe: int = 0
    deferred: int = 0
    sweeps: int = 0
    ceiling_hit: bool = False
    wall_ms: float = 0.0

    def add_counters(self, c: np.ndarray) -> None:
        self.popped += int(c[K.C_POPPED])
        self.accepted += int(c[K.C_ACCEPTED])
        self.merges += int(c[K.C_MERGES])
        self.gate_rejects += int(c[K.C_GATE_REJECT])
        self.merge_rejects += int(c[K.C_MERGE_REJECT])
        self.unsafe += int(c[K.C_UNSAFE])
        self.deferred += int(c[K.C_DEFERRED])
        self.ceiling_hit = self.ceiling_hit or bool(c[K.C_CEILING])


@dataclass
class RunTrace:
    stages: list = field(default_factory=list)
    phases_ms: dict = field(default_factory=dict)
    schedule: list = field(default_factory=list)

    def add_phase(self, name: str, ms: float) -> None:
        self.phases_ms[name] = self.phases_ms.get(name, 0.0) + ms

    def popped(self, level=None) -> int:
        return sum(s.popped for s in self.stages if level is None or s.level == level)


@dataclass
class StageState:
    """Mutable state of one stage: block labels, aggregates, statistics, gate."""

    grid: BlockGrid
    blab: np.ndarray
    stats: SuperpixelStats
    flags: Optional[np.ndarray] = None

    @property
    def gated(self) -> bool:
        return self.flags is not None

    def flag_array(self) -> np.ndarray:
        if self.flags is None:
            return np.zeros(self.stats.m, dtype=np.bool_)
        return self.flags

    def pixel_labels(self) -> np.ndarray:
        return expand_block_labels(self.blab, self.grid.b, self.grid.width, self.grid.height)

    def label_map(self) -> LabelMap:
        return LabelMap(self.pixel_labels(), self.stats.m)


class BoundaryQueue:
    """FIFO of block indices with an in-queue flag per block."""

    def __init__(self, n_blocks: int, n_queues: int = 1, capacities=None):
        caps = np.asarray(capacities if capacities is not None else [n_blocks], dtype=np.int64)
        caps = np.maximum(caps, 1)
        self.qbuf = np.zeros(int(caps.sum()), dtype=np.int64)
        self.qoff = np.concatenate([[0], np.cumsum(caps)[:-1]]).astype(np.int64)
        self.qcap = caps
        self.qhead = np.zeros(n_queues, dtype=np.int64)
        self.qcnt = np.zeros(n_queues, dtype=np.int64)
        self.inq = np.zeros(n_blocks, dtype=np.uint8)

    def __len__(self) -> int:
        return int(self.qcnt.sum())

    def blocks(self, w: int = 0) -> list:
        off, cap, head = self.qoff[w], self.qcap[w], self.qhead[w]
        return [int(self.qbuf[off + (head + i) % cap]) for i in range(int(self.qcnt[w]))]


def seed_boundary_queue(state: StageState, queue: Optional[BoundaryQueue] = None) -> BoundaryQueue:
    """Enqueue, row-major, every block with a differently labeled 4-neighbor,
    restricted to flagged superpixels when the state is gated."""
    hb = state.blab.shape[0]
    if queue is None:
        queue = BoundaryQueue(state.blab.size)
    K.seed_rows(
        state.blab, state.gated, state.flag_array(), 0, hb, 0,
        queue.qbuf, queue.qoff, queue.qcap, queue.qhead, queue.qcnt, queue.inq,
    )
    return queue


class _Scratch:
    def __init__(self, n_blocks: int):
        self.stamp = np.zeros(n_blocks, dtype=np.int32)
        self.stamp_ctr = np.zeros(1, dtype=np.int64)
        self.stack = np.zeros(n_blocks, dtype=np.int64)
        self.members = np.zeros(n_blocks, dtype=np.int64)
        self.nb_lab = np.zeros(4096, dtype=np.int64)
        self.nb_len = np.zeros(4096)


def _ceiling(state: StageState, factor: float) -> int:
    return int(factor * state.grid.width * state.grid.height)


def drain(
    state: StageState, params: EnergyParams, queue: BoundaryQueue, trace: StageTrace,
    max_changes: int = -1, ceiling: Optional[int] = None, scratch: Optional[_Scratch] = None,
) -> int:
    """Run the serial FIFO loop; returns moves plus merges performed."""
    scratch = scratch or _Scratch(state.blab.size)
    counters = np.zeros(K.N_COUNTERS, dtype=np.int64)
    changes = K.drain_serial(
        state.blab, state.grid.b, state.grid.width, state.grid.height, state.grid.agg,
        state.stats.table, state.stats.alive, state.flag_array(), state.gated, params.vector(1),
        queue.qbuf, queue.qoff, queue.qcap, queue.qhead, queue.qcnt, queue.inq,
        np.zeros(state.blab.shape[0], dtype=np.int32),
        scratch.stamp, scratch.stamp_ctr, scratch.stack, scratch.members, scratch.nb_lab, scratch.nb_len,
        counters, max_changes, ceiling if ceiling is not None else 2**62,
    )
    trace.add_counters(counters)
    return int(changes)


def refine_stage(
    state: StageState, params: EnergyParams, level: int = 1,
    on_change: Optional[Callable] = None, move_ceiling: float = 50.0,
) -> StageTrace:
    """Drain boundary queues until a full sweep changes nothing.

    Each sweep seeds the queue from scratch; the stage ends after a sweep with
    no accepted move and no merge, so an immediate second call is a no-op.
    ``on_change(state)`` is called after every accepted move or merge.
    """
    t0 = time.perf_counter()
    trace = StageTrace(level=level, b=state.grid.b)
    ceiling = _ceiling(state, move_ceiling)
    scratch = _Scratch(state.blab.size)
    while True:
        queue = seed_boundary_queue(state)
        trace.seeded += len(queue)
        trace.sweeps += 1
        if on_change is None:
            changes = drain(state, params, queue, trace, ceiling=ceiling - trace.accepted, scratch=scratch)
        else:
            changes = 0
            while len(queue):
                step = drain(state, params, queue, trace, max_changes=1,
                             ceiling=ceiling - trace.accepted, scratch=scratch)
                if step == 0:
                    break
                changes += step
                on_change(state)
        if changes == 0 or trace.ceiling_hit:
            break
    trace.wall_ms = (time.perf_counter() - t0) * 1e3
    return trace


def check_stage_integrity(state: StageState, before: Optional[tuple] = None) -> None:
    """Compare maintained statistics with a recomputation from the block grid.

    With ``before = (maintained, recomputed)`` snapshots only the change over
    the stage is compared, which is what matters once statistics were
    synthesized from a coarser level.
    """
    fresh = SuperpixelStats.from_blocks(state.blab, state.grid, state.stats.m)
    if before is None:
        state.stats.check(fresh)
        return
    kept, exact = before
    moved = SuperpixelStats(state.stats.table - kept.table, state.stats.alive, state.stats.channels)
    truth = SuperpixelStats(fresh.table - exact.table, state.stats.alive, state.stats.channels)
    moved.check(truth)


# ---------------------------------------------------------------------------
# multi-level driver


StageRunner = Callable[[StageState, EnergyParams, int], StageTrace]


def _serial_runner(move_ceiling: float) -> StageRunner:
    def run(state, params, level):
        return refine_stage(state, params, level, move_ceiling=move_ceiling)

    return run


def _initial_block_labels(grid: BlockGrid, m: int) -> np.ndarray:
    return init_grid_labels(grid.cols, grid.rows, m).labels


def _first_stage_sizes(img: Image, sizes: list, m: int) -> list:
    """Drop leading block sizes whose block grid cannot host an M-cell tiling."""
    kept = list(sizes)
    while kept:
        b = kept[0]
        try:
            choose_tiling(-(-img.width // b), -(-img.height // b), m)
            return kept
        except InitializationError:
            kept.pop(0)
    raise InitializationError(f"M={m} does not fit a {img.width}x{img.height} image")


def _refine_block_labels(blab: np.ndarray, b_old: int, b_new: int, width: int, height: int) -> np.ndarray:
    r = b_old // b_new
    rows, cols = -(-height // b_new), -(-width // b_new)
    return np.ascontiguousarray(np.repeat(np.repeat(blab, r, axis=0), r, axis=1)[:rows, :cols])


@dataclass
class LevelHooks:
    """Variation points between the multi-level engines.

    ``level_stats(level, state_prev_stats, grid, blab, ratio)`` returns the
    statistics a finer level starts from; ``predict(level1_img, labels,
    stats)`` returns per-superpixel boundary flags for gating (or None);
    ``map_labels`` performs the coarse-to-fine label upsampling.
    """

    level_stats: Callable
    predict: Optional[Callable] = None
    map_labels: Callable = upsample_labels
    initial_stats: Optional[Callable] = None


def recompute_level_stats(level, prev: SuperpixelStats, grid: BlockGrid, blab: np.ndarray, ratio: int):
    return SuperpixelStats.from_blocks(blab, grid, prev.m, prev.init_size * ratio * ratio)


def drive(
    pyr: Pyramid, config: SegmentConfig, hooks: LevelHooks, runner: Optional[StageRunner] = None,
    trace: Optional[RunTrace] = None,
) -> tuple[StageState, LabelMap, RunTrace]:
    """Run all levels and stages; returns the last stage state, the final
    pixel label map and the trace."""
    trace = trace if trace is not None else RunTrace()
    runner = runner or _serial_runner(config.move_ceiling)
    dims = [(img.width, img.height) for img in pyr.levels]
    schedule = config.schedule or default_schedule(dims, pyr.ratio, config.final_grain, config.chain)
    params_base = config.params
    state = None
    flags = None
    pixel_labels = None
    last_b = None
    for level in range(1, pyr.level_count + 1):
        img = pyr.level(level)
        sizes = schedule.sizes(level)
        if level == 1:
            sizes = _first_stage_sizes(img, sizes, config.m)
        elif hooks.predict is not None and level == 2:
            t0 = time.perf_counter()
            flags = hooks.predict(pyr.level(1), LabelMap(pixel_labels, config.m), state.stats)
            trace.add_phase("predict", (time.perf_counter() - t0) * 1e3)
        trace.schedule.append({"level": level, "block_sizes": list(sizes)})
        level_params = params_base.with_pos_norm(img.width * img.height / config.m)

        if level > 1:
            t0 = time.perf_counter()
            coarse = LabelMap(pixel_labels, config.m)
            pixel_labels = hooks.map_labels(coarse, pyr.ratio, img.width, img.height).labels
            trace.add_phase("mapping", (time.perf_counter() - t0) * 1e3)
        if not sizes:
            # nothing to refine at this level; carry statistics and labels along
            if level > 1:
                grid = block_aggregate(img, 1)
                t0 = time.perf_counter()
                stats = hooks.level_stats(level, state.stats, grid, pixel_labels, pyr.ratio)
                trace.add_phase("stats", (time.perf_counter() - t0) * 1e3)
                state = StageState(grid, pixel_labels.copy(), stats, flags)
            last_b = None
            continue

        for si, b in enumerate(sizes):
            t0 = time.perf_counter()
            grid = block_aggregate(img, b)
            trace.add_phase("blocks", (time.perf_counter() - t0) * 1e3)
            t0 = time.perf_counter()
            if level == 1 and si == 0:
                blab = _initial_block_labels(grid, config.m)
                trace.add_phase("mapping", (time.perf_counter() - t0) * 1e3)
                t0 = time.perf_counter()
                init_stats = hooks.initial_stats or (
                    lambda bl, g, m: SuperpixelStats.from_blocks(bl, g, m)
                )
                stats = init_stats(blab, grid, config.m)
                stats.table[:, INIT] = stats.table[:, 0]
                trace.add_phase("stats", (time.perf_counter() - t0) * 1e3)
                state = StageState(grid, blab, stats, None)
            elif si == 0:
                blab = sample_block_labels(pixel_labels, b)
                trace.add_phase("mapping", (time.perf_counter() - t0) * 1e3)
                t0 = time.perf_counter()
                stats = hooks.level_stats(level, state.stats, grid, blab, pyr.ratio)
                trace.add_phase("stats", (time.perf_counter() - t0) * 1e3)
                state = StageState(grid, blab, stats, flags)
            else:
                blab = _refine_block_labels(state.blab, last_b, b, img.width, img.height)
                trace.add_phase("mapping", (time.perf_counter() - t0) * 1e3)
                state = StageState(grid, blab, state.stats, flags)

            before = None
            if config.check_integrity:
                before = (state.stats.copy(), SuperpixelStats.from_blocks(state.blab, grid, config.m))
            st = runner(state, level_params, level)
            trace.stages.append(st)
            trace.add_phase("refine", st.wall_ms)
            if config.check_integrity:
                check_stage_integrity(state, before)
                if not is_topology_valid(state.blab, state.stats.alive):
                    raise IntegrityError(f"level {level} stage b={b}: topology violated")
            if config.observer is not None:
                config.observer(level, b, state)
            last_b = b
        pixel_labels = state.pixel_labels()
    return state, LabelMap(pixel_labels, config.m), trace


def run_ctftps(img: Image, config: SegmentConfig, trace: Optional[RunTrace] = None) -> LabelMap:
    """Single-level coarse-to-fine topology-preserving segmentation."""
    pyr = Pyramid(levels=(img,), ratio=1)
    return drive(pyr, config, LevelHooks(level_stats=recompute_level_stats), trace=trace)[1]


def run_multiscale(pyr: Pyramid, config: SegmentConfig, trace: Optional[RunTrace] = None) -> LabelMap:
    """Multi-scale baseline: statistics are recomputed from the image at every level."""
    return drive(pyr, config, LevelHooks(level_stats=recompute_level_stats), trace=trace)[1]
