"""Row-partitioned parallel stages.

Block rows are split evenly between workers.  Each worker drains its own
FIFO with the compiled kernels on a thread that releases the GIL.  Workers
never write shared statistics: each keeps a private delta table and reads
``S + D``.  Blocks on a worker's first and last row (those whose 3x3 ring can
reach another partition) and moves that would hit a size bound are parked
and replayed serially after the deltas are folded back, which is also where
every merge happens.  Rounds repeat until no queue holds work.

Because workers touch disjoint rows and disjoint tables, the result depends
only on the worker count, never on thread timing.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .energy import EnergyParams, SuperpixelStats
from .engine import (
    BoundaryQueue,
    RunTrace,
    SegmentConfig,
    StageState,
    StageTrace,
    _Scratch,
    refine_stage,
)
from .grid import INIT, BlockGrid, LabelMap, MappingError, Pyramid
from .predict import LinearModel, PredictionMap, run_rapid


@dataclass(frozen=True)
class RowPartition:
    worker: int
    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start


def partition_bounds(total_rows: int, workers: int) -> np.ndarray:
    """Row boundaries ``floor(T * i / W)`` for ``i = 0..W``."""
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if total_rows < 0:
        raise ValueError(f"total_rows must be >= 0, got {total_rows}")
    return np.arange(workers + 1, dtype=np.int64) * total_rows // workers


def partition_rows(total_rows: int, workers: int) -> list:
    """Worker i owns rows ``[floor(T*i/W), floor(T*(i+1)/W))``."""
    bounds = partition_bounds(total_rows, workers).tolist()
    return [RowPartition(i, bounds[i], bounds[i + 1]) for i in range(workers)]


def _row_chunks(n: int, workers: int) -> list:
    return [(p.start, p.end) for p in partition_rows(n, workers) if len(p)]


class _ParallelStage:
    def __init__(self, state: StageState, params: EnergyParams, workers: int, pool: ThreadPoolExecutor):
        self.state = state
        self.pool = pool
        hb, wb = state.blab.shape
        self.parts = [p for p in partition_rows(hb, workers) if len(p)]
        self.nw = len(self.parts)
        self.prm = params.vector(self.nw)
        self.row_owner = np.zeros(hb, dtype=np.int32)
        for i, p in enumerate(self.parts):
            self.row_owner[p.start : p.end] = i
        self.caps = [len(p) * wb for p in self.parts]
        self.scratch = _Scratch(state.blab.size)
        self.deferred = [np.zeros(c, dtype=np.int64) for c in self.caps]
        self.flags = state.flag_array()

    def _seed(self, queue: BoundaryQueue) -> int:
        st = self.state

        def seed(i):
            p = self.parts[i]
            return K.seed_rows(
                st.blab, st.gated, self.flags, p.start, p.end, i,
                queue.qbuf, queue.qoff, queue.qcap, queue.qhead, queue.qcnt, queue.inq,
            )

        return sum(self.pool.map(seed, range(self.nw)))

    def _concurrent(self, queue, trace: StageTrace, ceiling: int):
        st = self.state
        table = st.stats.table

        def work(i):
            p = self.parts[i]
            d = np.zeros_like(table)
            counters = np.zeros(K.N_COUNTERS, dtype=np.int64)
            nd = np.zeros(1, dtype=np.int64)
            changes = K.drain_worker(
                i, p.start, p.end, i > 0, i < self.nw - 1,
                st.blab, st.grid.b, st.grid.width, st.grid.height, st.grid.agg,
                table, d, st.stats.alive, self.flags, st.gated, self.prm,
                queue.qbuf, queue.qoff, queue.qcap, queue.qhead, queue.qcnt, queue.inq, self.row_owner,
                self.deferred[i], nd, counters, ceiling,
            )
            return changes, d, counters, int(nd[0])

        results = list(self.pool.map(work, range(self.nw)))
        changes = 0
        parked = []
        for i, (c, d, counters, nd) in enumerate(results):
            changes += c
            d[:, INIT] = 0.0
            table += d
            trace.add_counters(counters)
            parked.append(self.deferred[i][:nd].copy())
        return changes, np.concatenate(parked)

    def _serial(self, items: np.ndarray, queue, trace: StageTrace) -> int:
        st = self.state
        sc = self.scratch
        counters = np.zeros(K.N_COUNTERS, dtype=np.int64)
        changes = K.drain_deferred(
            items, len(items),
            st.blab, st.grid.b, st.grid.width, st.grid.height, st.grid.agg,
            st.stats.table, st.stats.alive, self.flags, st.gated, self.prm,
            queue.qbuf, queue.qoff, queue.qcap, queue.qhead, queue.qcnt, queue.inq, self.row_owner,
            sc.stamp, sc.stamp_ctr, sc.stack, sc.members, sc.nb_lab, sc.nb_len, counters,
        )
        # the concurrent phase already counted these blocks as deferred, not popped
        trace.add_counters(counters)
        return int(changes)

    def sweep(self, trace: StageTrace, ceiling: int) -> int:
        queue = BoundaryQueue(self.state.blab.size, self.nw, self.caps)
        trace.seeded += self._seed(queue)
        trace.sweeps += 1
        changes = 0
        while len(queue):
            c, parked = self._concurrent(queue, trace, max(ceiling - trace.accepted, 0))
            changes += c
            if trace.ceiling_hit:
                break
            changes += self._serial(parked, queue, trace)
        return changes


def run_parallel_stage(
    state: StageState, params: EnergyParams, workers: int, level: int = 1,
    move_ceiling: float = 50.0, pool: Optional[ThreadPoolExecutor] = None,
) -> StageTrace:
    """Parallel counterpart of :func:`rapidseg.engine.refine_stage`.

    ``workers == 1`` runs the serial stage itself, so its output is identical.
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if workers == 1:
        return refine_stage(state, params, level, move_ceiling=move_ceiling)
    t0 = time.perf_counter()
    trace = StageTrace(level=level, b=state.grid.b)
    ceiling = int(move_ceiling * state.grid.width * state.grid.height)
    own = pool is None
    pool = pool or ThreadPoolExecutor(max_workers=workers)
    try:
        stage = _ParallelStage(state, params, workers, pool)
        while True:
            if stage.sweep(trace, ceiling) == 0 or trace.ceiling_hit:
                break
    finally:
        if own:
            pool.shutdown()
    trace.wall_ms = (time.perf_counter() - t0) * 1e3
    return trace


def parallel_initial_stats(blab: np.ndarray, grid: BlockGrid, m: int, workers: int,
                           pool: Optional[ThreadPoolExecutor] = None) -> SuperpixelStats:
    """Statistics of a block labeling from per-row-range partial tables.

    All summed values are integers, so the reduction equals the serial sums exactly.
    """
    st = SuperpixelStats.empty(m, grid.channels)
    chunks = _row_chunks(blab.shape[0], workers)

    def part(rng):
        t = np.zeros_like(st.table)
        K.accumulate_stats(blab, grid.agg, t, rng[0], rng[1])
        return t

    if pool is None:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            partials = list(ex.map(part, chunks))
    else:
        partials = list(pool.map(part, chunks))
    for t in partials:
        st.table += t
    st.table[:, INIT] = st.table[:, 0]
    st.alive = st.table[:, 0] > 0
    return st


def parallel_upsample_labels(lm: LabelMap, ratio: int, target_w: int, target_h: int,
                             workers: int, pool: Optional[ThreadPoolExecutor] = None) -> LabelMap:
    """Row-split :func:`rapidseg.grid.upsample_labels`; every row is written by one thread."""
    for name, coarse, fine in (("width", lm.width, target_w), ("height", lm.height, target_h)):
        if coarse not in (-(-fine // ratio), max(fine // ratio, 1)):
            raise MappingError(f"{name}: coarse {coarse} does not map onto {fine} with ratio {ratio}")
    ys = np.minimum(np.arange(target_h) // ratio, lm.height - 1)
    xs = np.minimum(np.arange(target_w) // ratio, lm.width - 1)
    out = np.empty((target_h, target_w), dtype=lm.labels.dtype)

    def fill(rng):
        r0, r1 = rng
        out[r0:r1] = lm.labels[ys[r0:r1, None], xs[None, :]]

    chunks = _row_chunks(target_h, workers)
    if pool is None:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(fill, chunks))
    else:
        list(pool.map(fill, chunks))
    return LabelMap(out, lm.m)


def run_parallel_rapid(
    pyr: Pyramid, config: SegmentConfig, model: Optional[LinearModel], workers: int,
    trace: Optional[RunTrace] = None,
) -> tuple[LabelMap, PredictionMap]:
    """RAPID with parallel stages, label mapping and level-1 statistics.

    ``workers == 1`` is exactly :func:`rapidseg.predict.run_rapid`.
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if workers == 1:
        return run_rapid(pyr, config, model, trace)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        def runner(state, params, level):
            return run_parallel_stage(state, params, workers, level, config.move_ceiling, pool)

        def extend(hooks):
            hooks.initial_stats = lambda bl, g, m: parallel_initial_stats(bl, g, m, workers, pool)
            hooks.map_labels = lambda lm, c, w, h: parallel_upsample_labels(lm, c, w, h, workers, pool)
            return hooks

        return run_rapid(pyr, config, model, trace, runner=runner, hooks_extra=extend)


def run_parallel_engine(
    algo: str, pyr: Pyramid, config: SegmentConfig, workers: int, trace: Optional[RunTrace] = None,
) -> LabelMap:
    """Parallel stages for the ungated engines (``ctftps`` or ``multiscale``)."""
    from .engine import LevelHooks, drive, recompute_level_stats

    if algo not in ("ctftps", "multiscale"):
        raise ValueError(f"unknown engine {algo!r}")
    if algo == "ctftps":
        pyr = Pyramid(levels=(pyr.levels[-1],), ratio=1)
    hooks = LevelHooks(level_stats=recompute_level_stats)
    if workers == 1:
        return drive(pyr, config, hooks, trace=trace)[1]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        def runner(state, params, level):
            return run_parallel_stage(state, params, workers, level, config.move_ceiling, pool)

        return drive(pyr, config, hooks, runner=runner, trace=trace)[1]
