"""Tests for the single, multi, ensemble and online detection pipelines."""

import json

import numpy as np
import pytest

from drecusum.core import BoundsError, GroundTruth, RandomSource, SplitConfig, TimeSeries
from drecusum.cusum import SegmentationConfig
from drecusum.detect import (
    DetectionResult,
    EnsembleConfig,
    OnlineConfig,
    Strategy,
    WindowMode,
    detect_multi,
    detect_single,
    emitted_changes,
    ensemble_detect,
    iter_online,
    online_detect,
)
from drecusum.distributions import GaussianSpec, gaussian_kl, oracle_log_ratio
from drecusum.eval import SyntheticSpec, generate_synthetic
from drecusum.ratios import LearnedRatio, OracleRatio

from conftest import TINY_MLP, oracle_case


def kink_source(vertex_for_split):
    """Fake ratio source: +1 before a split-dependent vertex and -1 after it."""
    def source(series, t_split, rng):
        v = vertex_for_split(t_split)
        r = -np.ones(series.n)
        if v is not None:
            r[:v] = 1.0
        return r
    return source


def null_oracle(d=10):
    return OracleRatio([GaussianSpec(np.zeros(d))], GroundTruth(()))


class TestDetectSingle:
    def test_oracle_single_change(self, fig2b_case):
        series, _, source = fig2b_case
        result = detect_single(series, SplitConfig(250), source, rng=RandomSource(0))
        assert len(result.change_points) == 1
        assert abs(result.indices[0] - 150) <= 15
        assert result.change_points[0].verified

    @pytest.mark.parametrize("t_split", [100, 400])
    def test_split_robustness_oracle(self, fig2b_case, t_split):
        series, _, source = fig2b_case
        assert [abs(i - 150) <= 15 for i in detect_single(series, SplitConfig(t_split), source, rng=0).indices] == [True]

    def test_null_series_empty(self):
        series = TimeSeries(np.random.default_rng(4).normal(size=(500, 10)))
        assert detect_single(series, None, null_oracle(), rng=0).change_points == []

    def test_learned_null_series_empty(self):
        series = TimeSeries(np.random.default_rng(5).normal(size=(300, 5)))
        assert detect_single(series, None, TINY_MLP, rng=0).change_points == []

    def test_unverified_candidate_in_diagnostics(self):
        """A vertex that disappears on re-splitting is reported only as a diagnostic."""
        source = kink_source(lambda t: 120 if t == 250 else None)
        result = detect_single(TimeSeries(np.zeros((500, 1))), SplitConfig(250), source, rng=0)
        assert result.change_points == []
        assert result.diagnostics["strongest_unverified"].index == 120

    def test_verification_splits_add_candidates(self, fig2b_case):
        series, _, source = fig2b_case
        result = detect_single(series, SplitConfig(250, (400,)), source, rng=0)
        assert 400 in result.diagnostics["candidates"]
        assert len(result.change_points) == 1


class TestDetectMulti:
    def test_oracle_two_changes(self, fig3b_case):
        series, _, source = fig3b_case
        found = detect_multi(series, None, source, rng=0).indices
        assert len(found) == 2
        assert abs(found[0] - 150) <= 15 and abs(found[1] - 450) <= 15

    def test_reduces_to_single(self):
        """With one change the multi pipeline agrees with the single pipeline."""
        for seed in range(3):
            series, _, source = oracle_case("fig2b", seed)
            assert (detect_multi(series, SplitConfig(250), source, rng=seed).indices
                    == detect_single(series, SplitConfig(250), source, rng=seed).indices)

    def test_equal_delta_segments_merge(self):
        """Adjacent segments with equal KL contrast produce one slope, so their boundary is missed."""
        left, right = GaussianSpec([-1.0]), GaussianSpec([1.0])
        segments = [GaussianSpec([-1.0]), GaussianSpec([-1.0], [9.0]), GaussianSpec([1.0])]
        deltas = [gaussian_kl(p, right) - gaussian_kl(p, left) for p in segments]
        assert deltas[0] == pytest.approx(deltas[1])
        gen = np.random.default_rng(0)
        data = np.vstack([segments[0].sample(199, gen), segments[1].sample(200, gen), segments[2].sample(201, gen)])

        def source(series, t_split, rng):
            return oracle_log_ratio(left, right, series.data)

        found = detect_multi(TimeSeries(data), None, source, rng=0).indices
        assert len(found) == 1 and abs(found[0] - 400) <= 15

    def test_sorted_and_separated(self, fig3b_case):
        series, _, source = fig3b_case
        result = detect_multi(series, None, source, rng=1)
        gap = SegmentationConfig().resolved(series.n).min_gap
        assert result.indices == sorted(result.indices)
        assert all(b - a >= gap for a, b in zip(result.indices, result.indices[1:]))


class TestEnsemble:
    def test_true_change_wins_vote(self, fig2b_case):
        series, _, source = fig2b_case
        result = ensemble_detect(series, EnsembleConfig.default(500), source, rng=0)
        assert len(result.indices) == 1 and abs(result.indices[0] - 150) <= 15
        assert result.diagnostics["votes"][0]["supporters"] == 3

    def test_symmetric_split_recovered_by_others(self):
        """A split where both halves have nearly the same law contributes nothing; the others still find both changes."""
        spec = SyntheticSpec(10, (200, 400, 600), ((0.0, 0.4), (0.6, 1.0), (0.0, 0.4)))
        series, truth, specs = generate_synthetic(spec, RandomSource(2), return_specs=True)
        source = OracleRatio(specs, truth)
        assert detect_multi(series, SplitConfig(300), source, rng=0).indices == []
        result = ensemble_detect(series, EnsembleConfig((150, 300, 450)), source, rng=0)
        assert len(result.indices) == 2
        assert abs(result.indices[0] - 200) <= 15 and abs(result.indices[1] - 400) <= 15

    def test_threshold_one_is_union(self):
        source = kink_source(lambda t: 100 if t in (150, 100) else (400 if t in (350, 400) else None))
        series = TimeSeries(np.zeros((500, 1)))
        union = ensemble_detect(series, EnsembleConfig((150, 350), vote_threshold=1), source, rng=0)
        assert union.indices == [100, 400]
        both = ensemble_detect(series, EnsembleConfig((150, 350), vote_threshold=2), source, rng=0)
        assert both.indices == []

    def test_weighted_sum_keeps_at_least_median(self):
        source = kink_source(lambda t: 100 if t in (150, 100) else (400 if t in (350, 400) else None))
        series = TimeSeries(np.zeros((500, 1)))
        result = ensemble_detect(series, EnsembleConfig((150, 350), Strategy.WeightedSum), source, rng=0)
        assert result.indices == [100, 400]

    @pytest.mark.parametrize("source_kind", ["oracle", "learned"])
    def test_identical_splits_equal_multi(self, fig2b_case, source_kind):
        series, _, oracle = fig2b_case
        source = oracle if source_kind == "oracle" else TINY_MLP
        ens = ensemble_detect(series, EnsembleConfig((250, 250, 250)), source, rng=RandomSource(9))
        multi = detect_multi(series, SplitConfig(250), source, rng=RandomSource(9))
        assert ens.indices == multi.indices

    def test_config_validation(self):
        with pytest.raises(BoundsError):
            EnsembleConfig((250,)).validate(500)
        with pytest.raises(BoundsError):
            EnsembleConfig((1, 250)).validate(500)
        assert EnsembleConfig.default(500).split_points == (125, 250, 375)


class TestOnline:
    def test_constant_stream_silent(self):
        results = online_detect(np.ones((400, 3)), OnlineConfig(200), TINY_MLP, rng=0)
        assert len(results) == 3 and emitted_changes(results) == []

    def test_short_stream_no_output(self):
        assert online_detect(np.zeros((50, 2)), OnlineConfig(100), TINY_MLP) == []

    def test_change_on_window_boundary(self):
        """A change at the end of one window is caught by the overlapping next window."""
        spec = SyntheticSpec(10, (201, 400), ((0.0, 0.4), (1.0, 1.4)))
        series, truth, specs = generate_synthetic(spec, RandomSource(1), return_specs=True)
        results = online_detect(series.data, OnlineConfig(200, 100), OracleRatio(specs, truth), rng=0)
        assert results[0].diagnostics["window"] == [1, 200] and results[0].indices == []
        assert len(results[1].indices) == 1 and abs(results[1].indices[0] - 200) <= 8
        assert emitted_changes(results) == results[1].indices

    @pytest.mark.parametrize("source_kind", ["oracle", "learned"])
    def test_whole_series_window_equals_multi(self, fig3b_case, source_kind):
        series, _, oracle = fig3b_case
        source = oracle if source_kind == "oracle" else TINY_MLP
        rng = RandomSource(4)
        results = online_detect(series.data, OnlineConfig(series.n, series.n), source, rng=rng)
        assert len(results) == 1
        assert results[0].indices == detect_multi(series, SplitConfig(series.n // 2), source, rng=rng.child(0)).indices

    def test_emissions_interior_and_unique(self):
        series, truth, source = oracle_case("fig3b", 0)
        results = online_detect(series.data, OnlineConfig(300, 100), source, rng=0)
        for r in results:
            lo, hi = r.diagnostics["window"]
            assert all(lo < i < hi for i in r.indices)
        emitted = emitted_changes(results)
        assert len(emitted) == 2
        assert abs(emitted[0] - 150) <= 15 and abs(emitted[1] - 450) <= 15

    def test_adaptive_restarts_after_detection(self):
        series, _, source = oracle_case("fig3b", 0)
        results = online_detect(series.data, OnlineConfig(300, 100, WindowMode.AdaptiveWindow), source, rng=0)
        for prev, nxt in zip(results, results[1:]):
            if prev.indices:
                assert nxt.diagnostics["window"][0] == max(prev.indices) + 1

    def test_generator_is_lazy(self):
        series, _, source = oracle_case("fig2b", 0)
        stream = iter_online(iter(series.data), OnlineConfig(200), source, rng=0)
        first = next(stream)
        assert first.diagnostics["window"] == [1, 200]

    def test_config_validation(self):
        with pytest.raises(BoundsError):
            OnlineConfig(4).resolved()
        with pytest.raises(BoundsError):
            OnlineConfig(100, 0).resolved()
        assert OnlineConfig(100).resolved().stride == 50
        with pytest.raises(BoundsError):
            online_detect(np.zeros((100, 1)), OnlineConfig(20), TINY_MLP, SegmentationConfig(min_gap=10))


class TestReproducibility:
    def test_all_pipelines_bitwise(self):
        series, _, _ = oracle_case("fig2b", 0)
        runs = [
            lambda: detect_single(series, SplitConfig(250), TINY_MLP, rng=7),
            lambda: detect_multi(series, SplitConfig(250), TINY_MLP, rng=7),
            lambda: ensemble_detect(series, EnsembleConfig((200, 300)), TINY_MLP, rng=7),
            lambda: online_detect(series.data, OnlineConfig(250), TINY_MLP, rng=7)[-1],
        ]
        for run in runs:
            a, b = run(), run()
            assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
            assert np.array_equal(np.asarray(a.cusum[0].values if isinstance(a.cusum, list) else a.cusum.values),
                                  np.asarray(b.cusum[0].values if isinstance(b.cusum, list) else b.cusum.values))

    def test_cross_fitted_scores_out_of_sample(self, fig2b_case):
        series = fig2b_case[0]
        source = LearnedRatio(TINY_MLP, folds=2)
        source(series, 250, RandomSource(0))
        assert source.last_holdout.all()
        single = LearnedRatio(TINY_MLP)
        single(series, 250, RandomSource(0))
        assert single.last_holdout.sum() == 50


class TestOutputs:
    def test_json_document(self, tmp_path, fig2b_case):
        series, _, source = fig2b_case
        result = detect_single(series, None, source, rng=3)
        path = tmp_path / "out.json"
        result.write_json(path)
        doc = json.loads(path.read_text())
        assert set(doc) >= {"change_points", "t_splits", "seed", "config"}
        assert set(doc["change_points"][0]) == {"index", "magnitude", "verified"}
        assert doc["seed"] == 3 and doc["t_splits"] == [250]

    def test_cusum_sidecars(self, tmp_path, fig2b_case):
        series, _, source = fig2b_case
        single = detect_single(series, None, source, rng=0)
        assert single.write_cusum(tmp_path / "s.csv") == [str(tmp_path / "s.csv")]
        ens = ensemble_detect(series, EnsembleConfig((200, 300)), source, rng=0)
        paths = ens.write_cusum(tmp_path / "e.csv")
        assert [p.rsplit("/", 1)[1] for p in paths] == ["e_split200.csv", "e_split300.csv"]
        assert isinstance(single, DetectionResult)
