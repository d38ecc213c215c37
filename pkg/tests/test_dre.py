"""Tests for density-ratio models, objectives and training."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drecusum.core import DataError, RandomSource, TrainingError
from drecusum.dre import (
    KernelConfig,
    KernelRatioModel,
    MlpConfig,
    MlpRatioModel,
    Objective,
    config_from_dict,
    config_to_dict,
    kliep_objective,
    load_model,
    lsif_objective,
    median_bandwidth,
    objective_and_gradient,
    predict_ratio,
    save_model,
    train,
)


def constant_model(value: float, d: int = 2) -> KernelRatioModel:
    """Kernel model with zero weights whose output is ``value`` everywhere."""
    model = KernelRatioModel(np.zeros((1, d)), 1.0)
    model.parameters[-1] = math.log(math.expm1(value))
    return model


def kernel_forward(model: KernelRatioModel, x: np.ndarray) -> np.ndarray:
    """Independent evaluation of a kernel model by broadcasting."""
    sq = ((x[:, None, :] - model.centers[None, :, :]) ** 2).sum(axis=2)
    z = np.exp(-sq / (2 * model.bandwidth**2)) @ model.parameters[:-1] + model.parameters[-1]
    return np.clip(np.log1p(np.exp(z)), model.clamp_eps, 1 / model.clamp_eps)


def random_kernel(gen, d=2, m=5) -> KernelRatioModel:
    model = KernelRatioModel(gen.normal(size=(m, d)), 1.3)
    model.parameters[:] = gen.normal(scale=0.5, size=m + 1)
    return model


def random_mlp(gen, d=2, widths=(4, 3)) -> MlpRatioModel:
    return MlpRatioModel(d, widths, dtype=np.float64).initialize(gen)


def finite_difference(model, objective, xl, xr, h=1e-6):
    base = model.parameters.copy()
    grad = np.empty_like(base)
    for i in range(base.size):
        model.parameters[:] = base
        model.parameters[i] += h
        up = objective_and_gradient(model, objective, xl, xr)[0]
        model.parameters[:] = base
        model.parameters[i] -= h
        down = objective_and_gradient(model, objective, xl, xr)[0]
        grad[i] = (up - down) / (2 * h)
    model.parameters[:] = base
    return grad


class TestMedianBandwidth:
    def test_two_points(self):
        assert median_bandwidth([[0.0], [1.0]]) == 1.0

    def test_three_points(self):
        assert median_bandwidth([[0.0], [1.0], [2.0]]) == 1.0

    @given(st.floats(0.1, 100.0))
    def test_homogeneous(self, c):
        x = np.array([[0.0, 1.0], [2.0, 0.5], [3.0, -1.0], [0.2, 0.2]])
        assert median_bandwidth(c * x) == pytest.approx(c * median_bandwidth(x), rel=1e-12)

    def test_identical_samples(self):
        with pytest.raises(DataError):
            median_bandwidth([[1.0], [1.0]])


class TestObjectives:
    @given(st.floats(0.0, 5.0))
    def test_kliep_unit_ratio_is_zero(self, lagrange):
        """A ratio of exactly one scores zero for any batches and multiplier."""
        gen = np.random.default_rng(0)
        model = constant_model(1.0)
        assert kliep_objective(model, gen.normal(size=(5, 2)), gen.normal(size=(7, 2)), lagrange) == pytest.approx(
            0.0, abs=1e-12)

    def test_kliep_constant_e(self, gen):
        model = constant_model(math.e)
        value = kliep_objective(model, gen.normal(size=(4, 2)), gen.normal(size=(6, 2)), 1.0)
        assert value == pytest.approx(1 - (math.e - 1), abs=1e-12)
        assert value == pytest.approx(-0.71828, abs=1e-5)

    @pytest.mark.parametrize("w,expected", [(1.0, -1.0), (0.5, -0.75)])
    def test_lsif_constants(self, gen, w, expected):
        model = constant_model(w)
        assert lsif_objective(model, gen.normal(size=(3, 2)), gen.normal(size=(9, 2))) == pytest.approx(
            expected, abs=1e-12)

    def test_duplicate_formula_oracle(self, gen):
        """Both objectives agree with an independent re-implementation within 1e-12."""
        model = random_kernel(gen)
        xl, xr = gen.normal(size=(40, 2)), gen.normal(size=(30, 2)) + 0.5
        wl, wr = kernel_forward(model, xl), kernel_forward(model, xr)
        assert kliep_objective(model, xl, xr, 0.7) == pytest.approx(
            np.log(wl).sum() / 40 - 0.7 * (wr.sum() / 30 - 1), abs=1e-12)
        assert lsif_objective(model, xl, xr) == pytest.approx((wl**2).sum() / 40 - 2 * wr.sum() / 30, abs=1e-12)
        assert lsif_objective(model, xl, xr, swap=True) == pytest.approx(
            (wr**2).sum() / 30 - 2 * wl.sum() / 40, abs=1e-12)
        for objective, direct in ((Objective.KLIEP, kliep_objective(model, xl, xr)),
                                  (Objective.LSIF, lsif_objective(model, xl, xr))):
            assert objective_and_gradient(model, objective, xl, xr)[0] == pytest.approx(direct, abs=1e-12)


class TestGradients:
    @pytest.mark.parametrize("objective", list(Objective))
    @pytest.mark.parametrize("kind", ["kernel", "mlp"])
    @pytest.mark.parametrize("d", [1, 3])
    def test_matches_finite_differences(self, objective, kind, d):
        """Analytic gradients agree with central differences to 1e-4 relative error."""
        gen = np.random.default_rng(d)
        model = random_kernel(gen, d) if kind == "kernel" else random_mlp(gen, d)
        assert model.parameters.size <= 50
        xl, xr = gen.normal(size=(8, d)), gen.normal(size=(6, d)) + 0.3
        analytic = objective_and_gradient(model, objective, xl, xr)[1]
        numeric = finite_difference(model, objective, xl, xr)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert rel <= 1e-4


class TestModels:
    def test_fresh_mlp_positive(self, gen):
        model = MlpRatioModel(3, (8, 4)).initialize(gen)
        assert np.all(model.predict(gen.normal(scale=100, size=(50, 3))) > 0)

    def test_fresh_mlp_starts_near_one(self, gen):
        model = MlpRatioModel(3, (8, 4)).initialize(gen)
        assert predict_ratio(model, np.zeros(3)) == pytest.approx(1.0, abs=0.5)

    def test_clamp(self):
        """A raw output of 1e9 is clamped to 1 / eps."""
        model = KernelRatioModel(np.zeros((1, 1)), 1.0, clamp_eps=1e-6)
        model.parameters[-1] = 1e9
        assert predict_ratio(model, [0.0]) == pytest.approx(1e6)

    def test_single_center_bump(self):
        """One centre with a fixed weight is a softplus-wrapped Gaussian bump."""
        model = KernelRatioModel(np.array([[1.0, -1.0]]), 0.8)
        model.parameters[:] = [2.0, -0.5]
        x = np.array([0.3, 0.4])
        z = 2.0 * math.exp(-np.sum((x - [1.0, -1.0]) ** 2) / (2 * 0.64)) - 0.5
        assert predict_ratio(model, x) == pytest.approx(math.log1p(math.exp(z)), rel=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
    def test_always_positive(self, x):
        model = MlpRatioModel(3, (5,)).initialize(np.random.default_rng(1))
        assert predict_ratio(model, np.array(x)) > 0

    def test_dimension_mismatch(self, gen):
        model = MlpRatioModel(3, (4,)).initialize(gen)
        with pytest.raises(DataError):
            model.predict(np.zeros((2, 4)))

    @pytest.mark.parametrize("cfg", [KernelConfig(n_centers=10, iterations=20), MlpConfig((6,), iterations=20)])
    def test_save_load_round_trip(self, tmp_path, gen, cfg):
        x = gen.normal(size=(60, 2))
        model, _ = train(cfg, x, x + 1, RandomSource(0))
        save_model(model, tmp_path / "m.json", cfg)
        loaded = load_model(tmp_path / "m.json")
        assert np.array_equal(loaded.predict(x), model.predict(x))

    def test_config_round_trip(self):
        cfg = MlpConfig(hidden_widths=(8, 4), objective=Objective.LSIF, iterations=7)
        assert config_from_dict(config_to_dict(cfg)) == cfg
        with pytest.raises(DataError):
            config_from_dict({"model": "mlp", "nope": 1})


class TestTraining:
    def test_deterministic(self, gen):
        """Same config, seed and data give bitwise-identical parameters."""
        left, right = gen.normal(size=(200, 3)), gen.normal(size=(200, 3)) + 0.5
        for cfg in (MlpConfig((16,), iterations=50), KernelConfig(n_centers=20, iterations=50)):
            a, _ = train(cfg, left, right, RandomSource(3))
            b, _ = train(cfg, left, right, RandomSource(3))
            assert a.parameters.tobytes() == b.parameters.tobytes()

    def test_report(self, gen):
        left, right = gen.normal(size=(100, 2)), gen.normal(size=(100, 2))
        _, report = train(MlpConfig((8,), iterations=30), left, right, RandomSource(0))
        assert report.iterations_run == 30 == len(report.objective_trace)
        assert len(report.holdout_left) == 10 and len(report.holdout_right) == 10

    def test_identity_data(self):
        """Same-law halves give held-out mean |log w| below 0.2."""
        gen = np.random.default_rng(1)
        left, right = gen.normal(size=(2000, 10)), gen.normal(size=(2000, 10))
        model, report = train(MlpConfig(), left, right, RandomSource(1))
        held = np.vstack([left[report.holdout_left], right[report.holdout_right]])
        assert np.mean(np.abs(model.log_ratio(held))) < 0.2

    def test_sign_of_learned_ratio(self):
        """Held-out left rows get positive and right rows negative mean log-ratio."""
        gen = np.random.default_rng(2)
        mu = gen.uniform(0.6, 1.0, 10)
        left, right = gen.normal(size=(1000, 10)), gen.normal(size=(1000, 10)) + mu
        model, report = train(MlpConfig(), left, right, RandomSource(2))
        assert model.log_ratio(left[report.holdout_left]).mean() > 0
        assert model.log_ratio(right[report.holdout_right]).mean() < 0

    def test_kliep_normalization_residual(self):
        """Near convergence the held-out right-side mean of w is within 0.15 of one.

        Large batches keep the minibatch estimate of the constraint term
        accurate enough for the parameters to settle.
        """
        gen = np.random.default_rng(4)
        left, right = gen.normal(size=(10_000, 1)), gen.normal(1.0, 1.0, size=(10_000, 1))
        cfg = MlpConfig(hidden_widths=(64, 64), batch_left=512, batch_right=512)
        _, report = train(cfg, left, right, RandomSource(4))
        assert report.normalization_residual < 0.15

    def test_ratio_at_symmetric_point(self):
        """N(0,1) against N(1,1): the ratio at 0.5 is within 0.35 of one."""
        gen = np.random.default_rng(5)
        left, right = gen.normal(size=(10_000, 1)), gen.normal(1.0, 1.0, size=(10_000, 1))
        model, _ = train(MlpConfig(), left, right, RandomSource(5))
        assert abs(predict_ratio(model, [0.5]) - 1.0) <= 0.35

    @pytest.mark.parametrize("cfg", [MlpConfig(full_batch=True),
                                     KernelConfig(full_batch=True, learning_rate=1e-3)])
    def test_kliep_trace_mostly_increasing(self, cfg):
        """Full-batch KLIEP ascent is non-decreasing in at least 90% of steps."""
        gen = np.random.default_rng(0)
        left, right = gen.normal(size=(200, 10)), gen.normal(size=(200, 10))
        _, report = train(cfg, left, right, RandomSource(0))
        assert np.mean(np.diff(report.objective_trace) >= 0) >= 0.9

    def test_lsif_descends(self, gen):
        left, right = gen.normal(size=(300, 2)), gen.normal(size=(300, 2)) + 1
        _, report = train(MlpConfig((16,), Objective.LSIF, iterations=200, full_batch=True), left, right, 0)
        assert report.objective_trace[-1] < report.objective_trace[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_objective_aborts(self, gen):
        """A non-finite objective stops training with a diagnostic.

        Clamping keeps the objective finite for any learning rate, so an
        infinite input row is used to trigger the guard.
        """
        left, right = gen.normal(size=(100, 2)), gen.normal(size=(100, 2))
        left[:, 0] = np.inf
        with pytest.raises(TrainingError, match="iteration 0"):
            train(MlpConfig((4,), standardize=False, holdout=0.0), left, right, RandomSource(0))

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            train(MlpConfig(), np.zeros((10, 2)), np.zeros((10, 3)))
