import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fixtures import disk, two_tone
from rapidseg.energy import EnergyParams, SuperpixelStats
from rapidseg.engine import SegmentConfig, StageState, refine_stage
from rapidseg.grid import LabelMap, block_aggregate, build_pyramid, init_grid_labels, upsample_labels
from rapidseg.parallel import (
    parallel_initial_stats, parallel_upsample_labels, partition_bounds, partition_rows,
    run_parallel_engine, run_parallel_rapid, run_parallel_stage,
)
from rapidseg.predict import run_rapid, train_threshold_model


class TestPartition:
    def test_four_way(self):
        assert [(p.start, p.end) for p in partition_rows(100, 4)] == [(0, 25), (25, 50), (50, 75), (75, 100)]

    def test_integer_division(self):
        assert [(p.start, p.end) for p in partition_rows(10, 3)] == [(0, 3), (3, 6), (6, 10)]

    def test_single_worker(self):
        assert [(p.start, p.end) for p in partition_rows(17, 1)] == [(0, 17)]

    def test_surplus_workers_get_empty_ranges(self):
        parts = partition_rows(2, 4)
        assert sum(len(p) for p in parts) == 2 and sum(1 for p in parts if len(p) == 0) == 2

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10**4), st.integers(1, 64))
    def test_tiling(self, t, w):
        parts = partition_rows(t, w)
        assert parts[0].start == 0 and parts[-1].end == t
        assert all(a.end == b.start for a, b in zip(parts, parts[1:]))
        assert np.array_equal(partition_bounds(t, w), [p.start for p in parts] + [t])

    def test_invalid(self):
        with pytest.raises(ValueError):
            partition_rows(5, 0)


def stage_state(img, m, b):
    g = block_aggregate(img, b)
    blab = init_grid_labels(g.cols, g.rows, m).labels
    return StageState(g, blab, SuperpixelStats.from_blocks(blab, g, m))


def oracle_energy(img, labels, m, params):
    col, pos = oracles.means(img.data, labels, m)
    return oracles.energy_fast(img.data, labels, col, pos, params.lambda_pos, params.lambda_b,
                               255.0, params.pos_norm)


class TestParallelStage:
    def test_single_worker_is_serial(self):
        img, _ = disk(96, 0)
        params = EnergyParams().with_pos_norm(96 * 96 / 36)
        a, b = stage_state(img, 36, 2), stage_state(img, 36, 2)
        refine_stage(a, params)
        run_parallel_stage(b, params, 1)
        assert np.array_equal(a.blab, b.blab) and np.array_equal(a.stats.table, b.stats.table)

    @pytest.mark.parametrize("workers", [2, 4, 8])
    @pytest.mark.parametrize("mode", ["hard-quarter", "merge"])
    def test_safety(self, workers, mode):
        img, _ = disk(128, 1)
        params = EnergyParams(lambda_pos=0.01, size_mode=mode).with_pos_norm(128 * 128 / 64)
        st = stage_state(img, 64, 1)
        before = st.stats.table[:, [0, 7]].sum(axis=0)
        tr = run_parallel_stage(st, params, workers)
        assert tr.accepted > 0
        st.stats.check(SuperpixelStats.from_blocks(st.blab, st.grid, 64))
        assert oracles.all_connected(st.blab)
        alive = st.stats.alive
        assert np.array_equal(np.unique(st.blab), np.flatnonzero(alive))
        assert np.array_equal(st.stats.table[:, [0, 7]].sum(axis=0), before)
        floor = 0.25 if mode == "hard-quarter" else params.l
        sizes = st.stats.size[alive] / st.stats.init_size[alive]
        assert (sizes >= floor).all() if mode == "hard-quarter" else (sizes > floor).all()

    def test_two_tone_energy_close_to_serial(self):
        img, _ = two_tone(128, 128, 45, lo=60, hi=180)
        params = EnergyParams().with_pos_norm(128 * 128 / 64)
        a, b = stage_state(img, 64, 1), stage_state(img, 64, 1)
        refine_stage(a, params)
        run_parallel_stage(b, params, 4)
        ea, eb = oracle_energy(img, a.blab, 64, params), oracle_energy(img, b.blab, 64, params)
        assert abs(eb - ea) <= 0.01 * ea

    def test_deterministic_per_worker_count(self):
        img, _ = disk(96, 2)
        params = EnergyParams().with_pos_norm(96 * 96 / 36)
        runs = []
        for _ in range(3):
            st = stage_state(img, 36, 1)
            run_parallel_stage(st, params, 4)
            runs.append(st.blab)
        assert all(np.array_equal(runs[0], r) for r in runs)


class TestParallelHelpers:
    @pytest.mark.parametrize("workers", [2, 3, 8])
    def test_initial_stats_exact(self, workers):
        img, _ = disk(70, 3)
        g = block_aggregate(img, 2)
        blab = init_grid_labels(g.cols, g.rows, 25).labels
        serial = SuperpixelStats.from_blocks(blab, g, 25)
        par = parallel_initial_stats(blab, g, 25, workers)
        assert np.array_equal(serial.table, par.table)

    @pytest.mark.parametrize("w,h", [(32, 32), (33, 31), (7, 5)])
    def test_upsample_equal(self, w, h):
        lm = LabelMap(np.random.default_rng(0).integers(0, 9, (-(-h // 2), -(-w // 2))), 9)
        assert np.array_equal(parallel_upsample_labels(lm, 2, w, h, 4).labels,
                              upsample_labels(lm, 2, w, h).labels)


class TestParallelRapid:
    def fixture(self):
        img, gt = disk(128, 4)
        pyr = build_pyramid(img, 2, 2)
        return pyr, train_threshold_model(pyr.level(1), gt[::2, ::2])

    def test_single_worker_is_run_rapid(self):
        pyr, model = self.fixture()
        cfg = SegmentConfig(m=64)
        a, pa = run_rapid(pyr, cfg, model)
        b, pb = run_parallel_rapid(pyr, cfg, model, 1)
        assert np.array_equal(a.labels, b.labels) and np.array_equal(pa.y, pb.y)

    @pytest.mark.parametrize("workers", [2, 4, 8])
    def test_integrity_and_topology(self, workers):
        pyr, model = self.fixture()
        seen = []
        cfg = SegmentConfig(m=64, check_integrity=True,
                            observer=lambda lvl, b, s: seen.append(oracles.all_connected(s.blab)))
        lm, pred = run_parallel_rapid(pyr, cfg, model, workers)
        assert seen and all(seen)
        assert oracles.all_connected(lm.labels)

    @pytest.mark.parametrize("algo", ["ctftps", "multiscale"])
    def test_ungated_engines(self, algo):
        pyr, _ = self.fixture()
        lm = run_parallel_engine(algo, pyr, SegmentConfig(m=64, check_integrity=True), 4)
        assert oracles.all_connected(lm.labels)
