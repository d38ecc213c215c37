"""Tests for the shared domain types and seeded randomness."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drecusum.core import (
    BoundsError,
    ChangePointEstimate,
    DataError,
    GroundTruth,
    RandomSource,
    Side,
    SplitConfig,
    TimeSeries,
    read_series_csv,
    read_truth,
    split_geometry,
    write_series_csv,
    write_truth,
)


class TestSplitGeometry:
    def test_split_right_of_change(self):
        """A split after the change mixes the left half with weight t_star / t_split."""
        g = split_geometry(500, 150, 250)
        assert g.side is Side.SplitRightOfChange
        assert g.alpha2 == pytest.approx(0.6)
        assert g.alpha1 is None

    def test_split_left_of_change(self):
        """A split before the change gives alpha1 = (n - t_star) / (n - t_split)."""
        g = split_geometry(500, 150, 100)
        assert g.side is Side.SplitLeftOfChange
        assert g.alpha1 == pytest.approx(350 / 400)
        assert g.alpha2 is None

    def test_tie_defines_both_weights(self):
        """When the split equals the change both weights are 1 and the side is left."""
        g = split_geometry(100, 50, 50)
        assert g.alpha1 == 1.0 and g.alpha2 == 1.0
        assert g.side is Side.SplitLeftOfChange

    def test_change_at_last_row_gives_zero_alpha1(self):
        """t_star = n leaves no post-change mass in the formula, so alpha1 is 0."""
        assert split_geometry(100, 100, 50).alpha1 == 0.0

    @pytest.mark.parametrize("n,t_star,t_split", [(500, 0, 250), (500, 501, 250), (500, 150, 1),
                                                   (500, 150, 500), (2, 1, 1)])
    def test_out_of_range_rejected(self, n, t_star, t_split):
        """Indices outside their admissible ranges raise a bounds error."""
        with pytest.raises(BoundsError):
            split_geometry(n, t_star, t_split)

    @given(st.integers(3, 5000).flatmap(
        lambda n: st.tuples(st.just(n), st.integers(1, n - 1), st.integers(2, n - 1))))
    def test_weights_in_unit_interval(self, args):
        """Whenever a weight is defined it lies in (0, 1] and the result is pure."""
        g = split_geometry(*args)
        for a in (g.alpha1, g.alpha2):
            assert a is None or 0.0 < a <= 1.0
        assert g == split_geometry(*args)


class TestRandomSource:
    def test_equal_seeds_equal_streams(self):
        """Two sources with the same seed draw identical sequences."""
        a = RandomSource(42).generator().standard_normal(100)
        b = RandomSource(42).generator().standard_normal(100)
        assert np.array_equal(a, b)

    def test_children_differ(self):
        """Children with different keys give different streams."""
        r = RandomSource(7)
        assert r.child(0).seed != r.child(1).seed
        assert r.child(0).seed == r.child(0).seed
        assert r.child(0, 1).seed != r.child(1, 0).seed

    @pytest.mark.parametrize("seed", [-1, 2**64])
    def test_seed_range(self, seed):
        """Seeds must be 64-bit unsigned integers."""
        with pytest.raises(BoundsError):
            RandomSource(seed)

    @given(st.integers(0, 2**64 - 1))
    def test_reproducible_for_any_seed(self, seed):
        """Bitwise-identical draws for any valid seed."""
        a = RandomSource(seed).generator().random(5)
        b = RandomSource(seed).generator().random(5)
        assert a.tobytes() == b.tobytes()


class TestTimeSeries:
    def test_shape_and_halves(self):
        """Left holds rows 1..t_split-1 and right holds t_split..n."""
        ts = TimeSeries(np.arange(20.0).reshape(10, 2))
        assert (ts.n, ts.d) == (10, 2)
        assert ts.left(4).shape == (3, 2)
        assert ts.right(4)[0, 0] == 6.0
        assert ts.window(2, 3).data[0, 0] == 2.0

    def test_vector_becomes_column(self):
        """A 1-D input is a single-column series."""
        assert TimeSeries([1.0, 2.0, 3.0]).d == 1

    @pytest.mark.parametrize("bad", [[[1.0], [np.nan]], [[1.0], [np.inf]], [[1.0]]])
    def test_rejects_bad_data(self, bad):
        """Non-finite entries and single rows are rejected."""
        with pytest.raises(DataError):
            TimeSeries(bad)

    def test_immutable(self):
        """The stored matrix is read-only."""
        ts = TimeSeries(np.zeros((3, 1)))
        with pytest.raises(ValueError):
            ts.data[0, 0] = 1.0


class TestSplitConfig:
    def test_bounds(self):
        """Both halves must be non-empty."""
        SplitConfig(2).validate(10)
        SplitConfig(9).validate(10)
        with pytest.raises(BoundsError):
            SplitConfig(1).validate(10)
        with pytest.raises(BoundsError):
            SplitConfig(10).validate(10)

    def test_default_is_midpoint(self):
        assert SplitConfig.default(501).t_split == 250


class TestEstimateAndTruth:
    def test_estimate_invariants(self):
        """Indices start at 1 and magnitudes are non-negative."""
        with pytest.raises(BoundsError):
            ChangePointEstimate(0)
        with pytest.raises(BoundsError):
            ChangePointEstimate(3, magnitude=-1.0)

    def test_truth_strictly_increasing(self):
        with pytest.raises(DataError):
            GroundTruth((5, 5))
        with pytest.raises(BoundsError):
            GroundTruth((1, 5)).validate(10)
        assert list(GroundTruth((2, 10)).validate(10)) == [2, 10]


class TestFileIO:
    def test_csv_round_trip(self, tmp_path, gen):
        """Writing then reading a series reproduces it exactly."""
        ts = TimeSeries(gen.normal(size=(7, 3)))
        path = tmp_path / "x.csv"
        write_series_csv(ts, path)
        assert read_series_csv(path) == ts

    def test_csv_diagnostics(self, tmp_path):
        """Malformed cells are reported with their row and column."""
        path = tmp_path / "bad.csv"
        path.write_text("1,2\n3,abc\n")
        with pytest.raises(DataError, match="row 2, column 2"):
            read_series_csv(path)
        path.write_text("1,2\n3\n")
        with pytest.raises(DataError, match="row 2"):
            read_series_csv(path)

    def test_truth_round_trip(self, tmp_path):
        path = tmp_path / "truth.txt"
        write_truth([150, 450], path)
        assert path.read_text() == "150\n450\n"
        assert read_truth(path).change_indices == (150, 450)
