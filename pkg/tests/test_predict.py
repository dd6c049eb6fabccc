import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import disk, random_image, two_tone
from rapidseg.energy import EnergyParams, SuperpixelStats
from rapidseg.engine import ConfigurationError, RunTrace, SegmentConfig, run_ctftps, run_multiscale
from rapidseg.grid import Image, LabelMap, build_pyramid, init_grid_labels, upsample_labels
from rapidseg.predict import (
    FeatureVector, LinearModel, ModelFormatError, PredictionMap, adapt_means, classify,
    extract_features, map_position, map_position_one_based, mark_boundary_superpixels,
    run_rapid, train_threshold_model,
)
from rapidseg.regularity import AdjacencyIndex


def setup(values, labels):
    img = Image(np.array(values, np.uint8))
    lm = LabelMap(np.array(labels), int(np.max(labels)) + 1)
    return img, lm, SuperpixelStats.from_pixels(img, lm), AdjacencyIndex.from_labels(lm.labels)


class TestFeatures:
    def test_constant_image(self):
        img, lm, s, adj = setup(np.full((4, 4), 100), init_grid_labels(4, 4, 4).labels)
        f = extract_features(0, s, adj, 100.0)
        assert f == FeatureVector(100 / 255, 0.0, 0.0, 0.0)

    def test_comparative(self):
        img, lm, s, adj = setup([[200, 200, 0, 0]], [[0, 0, 1, 1]])
        assert extract_features(0, s, adj, 100.0).comparative == pytest.approx(100 / 255)

    def test_intra_variance(self):
        img, lm, s, adj = setup([[0, 200, 50]], [[0, 0, 1]])
        assert extract_features(0, s, adj, 0.0).intra == pytest.approx(100**2 / 255**2)

    def test_extra_mean_difference(self):
        img, lm, s, adj = setup([[10, 110, 60]], [[1, 0, 2]])
        # neighbors 1 and 2 differ by 100 and 50
        assert extract_features(0, s, adj, 0.0).extra == pytest.approx(75 / 255)

    def test_rgb_brightness(self):
        data = np.zeros((1, 2, 3), np.uint8)
        data[0, 0] = (30, 60, 90)
        data[0, 1] = (0, 0, 0)
        img = Image(data)
        lm = LabelMap(np.array([[0, 0]]), 1)
        s = SuperpixelStats.from_pixels(img, lm)
        f = extract_features(0, s, AdjacencyIndex.from_labels(lm.labels), 0.0)
        assert f.absolute == pytest.approx(30 / 255)
        assert f.intra == pytest.approx(30**2 / 255**2)


class TestClassify:
    def test_zero_model_is_roi(self):
        assert classify(LinearModel(0.0, (0, 0, 0, 0)), FeatureVector(0.3, 0, 0, 0)) == 1

    def test_negative_bias(self):
        assert classify(LinearModel(-1.0, (0, 0, 0, 0)), FeatureVector(0.3, 0, 0, 0)) == -1

    def test_positive_dot(self):
        assert classify(LinearModel(0.0, (1, 0, 0, 0)), FeatureVector(0.5, 0, 0, 0)) == 1

    def test_non_finite(self):
        with pytest.raises(ValueError):
            classify(LinearModel(0.0, (1, 0, 0, 0)), [np.nan, 0, 0, 0])


class TestModelText:
    def test_round_trip(self):
        m = LinearModel(-0.25, (1.5, -2.0, 0.0, 3.25))
        assert LinearModel.loads(m.dumps()) == m

    def test_comments_and_order(self):
        m = LinearModel.loads("# trained\nw4 4\nw3 3\nbias 1\nw1 1\nw2 2\n")
        assert m.bias == 1 and m.weights == (1, 2, 3, 4)

    @pytest.mark.parametrize("text", ["bias 1\nw1 1\n", "bias x\nw1 1\nw2 1\nw3 1\nw4 1\n",
                                      "bias 1 2\n", "bias nan\nw1 1\nw2 1\nw3 1\nw4 1\n"])
    def test_errors(self, text):
        with pytest.raises(ModelFormatError):
            LinearModel.loads(text)

    def test_trainer_sign(self):
        bright, gt = two_tone(4, 8, 4, lo=40, hi=200)
        m = train_threshold_model(bright, gt == 1)
        assert m.weights[0] == 1 and m.bias == pytest.approx(-120 / 255)
        dark = train_threshold_model(bright, gt == 0)
        assert dark.weights[0] == -1
        assert classify(dark, FeatureVector(40 / 255, 0, 0, 0)) == 1


class TestPredictionMap:
    def test_round_trip(self):
        p = PredictionMap(np.array([1, 0, -1, 1], np.int8), np.array([1, 0, 1, 0], bool))
        q = PredictionMap.loads(p.dumps(), 4)
        assert np.array_equal(p.y, q.y) and np.array_equal(p.flags, q.flags)
        assert p.dumps() == "0 1 1\n2 -1 1\n3 1 0\n"

    def test_bad_line(self):
        with pytest.raises(ModelFormatError):
            PredictionMap.loads("0 2 1\n")


class TestMarkBoundary:
    def adj3x3(self):
        return AdjacencyIndex.from_labels(init_grid_labels(3, 3, 9).labels)

    def test_uniform_classes(self):
        p = PredictionMap(np.ones(9, np.int8), np.zeros(9, bool))
        assert not mark_boundary_superpixels(p, self.adj3x3()).flags.any()

    def test_adjacent_pair(self):
        adj = AdjacencyIndex.from_labels(np.array([[0, 1]]))
        p = PredictionMap(np.array([1, -1], np.int8), np.zeros(2, bool))
        assert mark_boundary_superpixels(p, adj).flags.tolist() == [True, True]

    def test_checkerboard(self):
        y = np.array([1, -1, 1, -1, 1, -1, 1, -1, 1], np.int8)
        out = mark_boundary_superpixels(PredictionMap(y, np.zeros(9, bool)), self.adj3x3())
        assert out.flags.all()

    def test_matches_exhaustive_rule(self):
        rng = np.random.default_rng(0)
        lab = init_grid_labels(5, 5, 25).labels
        adj = AdjacencyIndex.from_labels(lab)
        for _ in range(20):
            y = rng.choice(np.array([-1, 1], np.int8), 25)
            flags = mark_boundary_superpixels(PredictionMap(y, np.zeros(25, bool)), adj).flags
            for s in range(25):
                expect = any(y[t] != y[s] for t in range(25) if adj.adjacent(s, t))
                assert flags[s] == expect


class TestAdaptMeans:
    def test_identity_ratio(self):
        img = random_image(6, 6, 0)
        s = SuperpixelStats.from_pixels(img, init_grid_labels(6, 6, 4))
        assert np.array_equal(adapt_means(s, 1).table, s.table)

    def test_one_based_form(self):
        assert map_position_one_based(10, 2) == 19.5

    def test_zero_based_form(self):
        assert map_position(9, 2) == 18.5
        assert np.mean([18, 19]) == 18.5

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**20))
    def test_forms_agree_under_shift(self, c, k):
        mu = k / 1024
        assert map_position_one_based(mu + 1, c) - 1 == map_position(mu, c)

    @pytest.mark.parametrize("c", [2, 3, 4])
    def test_replicated_image_matches_recompute(self, c):
        coarse = random_image(5, 6, c, channels=3, smooth=False)
        fine = Image(np.repeat(np.repeat(coarse.data, c, 0), c, 1))
        lm = init_grid_labels(6, 5, 6)
        s = SuperpixelStats.from_pixels(coarse, lm)
        up = upsample_labels(lm, c, 6 * c, 5 * c)
        truth = SuperpixelStats.from_pixels(fine, up)
        adapted = adapt_means(s, c)
        assert np.allclose(adapted.table[:, :7], truth.table[:, :7], rtol=1e-12)
        assert np.allclose(adapted.table[:, 7:], truth.table[:, 7:], rtol=1e-12)
        assert np.array_equal(adapted.init_size, s.init_size * c * c)


class TestRunRapid:
    def test_requires_model(self):
        img, _ = disk(32, 0)
        with pytest.raises(ConfigurationError):
            run_rapid(build_pyramid(img, 2, 2), SegmentConfig(m=4), None)

    def test_single_level_is_merge_ctftps(self):
        img, _ = disk(64, 1)
        cfg = SegmentConfig(m=16, params=EnergyParams(size_mode="merge"))
        lm, pred = run_rapid(build_pyramid(img, 2, 1), cfg, None)
        assert np.array_equal(lm.labels, run_ctftps(img, cfg).labels)
        assert not pred.y.any()

    def test_constant_image_freezes(self):
        img = Image(np.full((64, 64), 120, np.uint8))
        pyr = build_pyramid(img, 2, 2)
        trace = RunTrace()
        model = LinearModel(-0.2, (1, 0, 0, 0))
        lm, pred = run_rapid(pyr, SegmentConfig(m=16), model, trace)
        assert set(pred.y[pred.ids]) == {1} and not pred.flags.any()
        assert trace.popped(2) == 0
        level1 = run_ctftps(pyr.level(1), SegmentConfig(m=16, params=EnergyParams(size_mode="merge")))
        assert np.array_equal(lm.labels, upsample_labels(level1, 2, 64, 64).labels)

    def test_gating_reduces_work(self):
        img, gt = disk(128, 2)
        pyr = build_pyramid(img, 2, 2)
        model = train_threshold_model(pyr.level(1), gt[::2, ::2])
        cfg = SegmentConfig(m=64, check_integrity=True)
        rt, mt = RunTrace(), RunTrace()
        lm, pred = run_rapid(pyr, cfg, model, rt)
        run_multiscale(pyr, cfg, mt)
        assert 0 < rt.popped(2) < mt.popped(2)
        roi = pred.roi_mask(lm.labels)
        assert (roi == gt).mean() > 0.95

    def test_prediction_only_alive(self):
        img, gt = disk(128, 3)
        pyr = build_pyramid(img, 2, 2)
        model = train_threshold_model(pyr.level(1), gt[::2, ::2])
        lm, pred = run_rapid(pyr, SegmentConfig(m=64), model)
        assert set(np.flatnonzero(pred.y)) == set(np.unique(lm.labels))
