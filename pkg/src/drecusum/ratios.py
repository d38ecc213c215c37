"""Sources of per-sample log-ratios ``log p_left(x_t) / p_right(x_t)`` for a split.

A ratio source is any callable ``(series, t_split, rng) -> log_ratios``.
:class:`LearnedRatio` trains a density-ratio model on the two halves;
:class:`OracleRatio` evaluates the exact ratio of a piecewise-Gaussian series
whose segment laws are known.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import GroundTruth, RandomSource, TimeSeries, check_split
from .distributions import GaussianSpec, oracle_log_ratio, split_laws
from .dre import DensityRatioModel, KernelConfig, MlpConfig, TrainReport, config_to_dict, train

VERIFY_HOLDOUT = 0.25

RatioSource = Callable[[TimeSeries, int, RandomSource], np.ndarray]


@dataclass
class LearnedRatio:
    """Train a density-ratio model on the two halves of the split.

    With ``folds=1`` one model is trained on (most of) each half and
    evaluated on every row, so the training rows are scored in-sample.
    With ``folds=2`` rows are dealt alternately into two folds; each fold's
    model is trained on that fold alone and scores the other fold, so every
    log-ratio is out-of-sample. ``last_holdout`` marks the rows whose
    log-ratio came from a model that never saw them. A split leaving fewer
    than four rows on one side falls back to a single model.
    """

    config: KernelConfig | MlpConfig = field(default_factory=MlpConfig)
    folds: int = 1
    last_model: DensityRatioModel | None = field(default=None, repr=False, compare=False)
    last_report: TrainReport | None = field(default=None, repr=False, compare=False)
    last_holdout: np.ndarray | None = field(default=None, repr=False, compare=False)

    source = "estimated"

    def __post_init__(self):
        if self.folds not in (1, 2):
            raise ValueError(f"folds must be 1 or 2, got {self.folds}")

    def __call__(self, series: TimeSeries, t_split: int, rng: RandomSource) -> np.ndarray:
        check_split(t_split, series.n)
        # each fold needs two rows per side; splits hugging an end fall back to one model
        if self.folds == 1 or min(t_split - 1, series.n - t_split + 1) < 4:
            model, report = train(self.config, series.left(t_split), series.right(t_split), rng)
            mask = np.zeros(series.n, dtype=bool)
            mask[report.holdout_left] = True
            mask[t_split - 1 + report.holdout_right] = True
            self.last_model, self.last_report, self.last_holdout = model, report, mask
            return model.log_ratio(series.data)

        rows = np.arange(series.n)
        fold = rows % 2
        left_rows = rows < t_split - 1
        out = np.empty(series.n, dtype=np.float64)
        for k in (0, 1):
            mine = fold == k
            model, report = train(self.config, series.data[mine & left_rows], series.data[mine & ~left_rows],
                                  rng.child(k))
            out[~mine] = model.log_ratio(series.data[~mine])
        self.last_model, self.last_report = model, report
        self.last_holdout = np.ones(series.n, dtype=bool)
        return out

    def verifier(self) -> "LearnedRatio":
        """Source for verification re-splits: a single model.

        At a verification split the candidate *is* the split, which is exactly
        where a single in-sample model puts its overfitting step, so the
        vertex is found either way; whether it is genuine is decided on the
        held-out rows, so a quarter of each side is held out (at least the
        configured share). One model costs half as much as two folds.
        """
        return LearnedRatio(replace(self.config, holdout=max(self.config.holdout, VERIFY_HOLDOUT)), folds=1)

    def describe(self) -> dict:
        out = config_to_dict(self.config)
        out["folds"] = self.folds
        return out


@dataclass
class OracleRatio:
    segment_specs: Sequence[GaussianSpec]
    truth: GroundTruth
    offset: int = 0

    source = "oracle"

    def __call__(self, series: TimeSeries, t_split: int, rng: RandomSource) -> np.ndarray:
        check_split(t_split, series.n)
        truth = self.truth
        if self.offset:
            # series is a window starting at global index offset + 1
            truth = GroundTruth(tuple(i - self.offset for i in truth if self.offset + 1 < i <= self.offset + series.n))
            specs = self._window_specs(series.n)
        else:
            specs = self.segment_specs
        left, right = split_laws(specs, truth, series.n, t_split)
        return np.asarray(oracle_log_ratio(left, right, series.data), dtype=np.float64)

    def _window_specs(self, length: int) -> list[GaussianSpec]:
        bounds = [1, *self.truth.change_indices]
        lo, hi = self.offset + 1, self.offset + length
        out = []
        for k, start in enumerate(bounds):
            stop = bounds[k + 1] - 1 if k + 1 < len(bounds) else float("inf")
            if start <= hi and stop >= lo:
                out.append(self.segment_specs[k])
        return out

    def shifted(self, offset: int) -> "OracleRatio":
        return OracleRatio(self.segment_specs, self.truth, offset)

    def describe(self) -> dict:
        return {"model": "oracle", "segments": len(self.segment_specs)}


def as_ratio_source(dre_config) -> RatioSource:
    if isinstance(dre_config, (KernelConfig, MlpConfig)):
        return LearnedRatio(dre_config, folds=2)
    if dre_config is None:
        return LearnedRatio(MlpConfig(), folds=2)
    if callable(dre_config):
        return dre_config
    raise TypeError(f"cannot use {type(dre_config).__name__} as a ratio source")


def describe_source(source) -> dict:
    describe = getattr(source, "describe", None)
    return describe() if describe else {"model": getattr(source, "__name__", type(source).__name__)}
