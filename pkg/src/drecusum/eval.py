"""Synthetic generators, FAR/MDR scoring, accuracy checks and the experiment harness."""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    BoundsError,
    DataError,
    GroundTruth,
    RandomSource,
    SplitConfig,
    TimeSeries,
    as_random_source,
    split_geometry,
)
from .cusum import DEFAULT_A_CLIP, SegmentationConfig, argmax_estimator, compute_cusum, write_cusum_csv
from .distributions import GaussianSpec, min_slope_c, oracle_log_ratio, split_laws, theorem_alpha
from .dre import config_from_dict

# ---------------------------------------------------------------- generators


class Covariance(str, enum.Enum):
    Identity = "identity"
    DiagonalFromSigmaRange = "diagonal"


@dataclass
class SyntheticSpec:
    """Piecewise-Gaussian series with i.i.d. rows inside each segment.

    ``segment_bounds`` lists the change indices followed by ``n``: a change
    index is the first row of the new segment, so bounds ``(150, 500)``
    give rows ``1..149`` and ``150..500``. Each segment's mean has entries
    drawn once from ``U[low, high]``; with ``cumulative`` the draw is added
    to the previous segment's mean instead. ``DiagonalFromSigmaRange`` draws
    one standard deviation per coordinate from ``sigma_range``, shared by all
    segments.
    """

    d: int
    segment_bounds: tuple[int, ...]
    mean_ranges: tuple[tuple[float, float], ...]
    covariance: Covariance = Covariance.Identity
    sigma_range: tuple[float, float] = (1.0, 3.0)
    cumulative: bool = False
    seed: int | None = None

    def __post_init__(self):
        self.segment_bounds = tuple(int(b) for b in self.segment_bounds)
        self.mean_ranges = tuple((float(lo), float(hi)) for lo, hi in self.mean_ranges)
        self.sigma_range = tuple(float(s) for s in self.sigma_range)
        self.covariance = Covariance(self.covariance)
        self.validate()

    @property
    def n(self) -> int:
        return self.segment_bounds[-1]

    @property
    def truth(self) -> GroundTruth:
        return GroundTruth(self.segment_bounds[:-1])

    def validate(self) -> "SyntheticSpec":
        if self.d < 1:
            raise DataError("d must be >= 1")
        if not self.segment_bounds:
            raise DataError("segment_bounds must end with n")
        starts = (1,) + self.segment_bounds[:-1]
        if self.segment_bounds[0] < 2:
            raise DataError("first segment is empty")
        for k, (a, b) in enumerate(zip(starts, self.segment_bounds)):
            last = k == len(self.segment_bounds) - 1
            if (b < a) if last else (b <= a):
                raise DataError(f"segment {k + 1} is empty: bounds {self.segment_bounds}")
        if len(self.mean_ranges) != len(self.segment_bounds):
            raise DataError(f"need {len(self.segment_bounds)} mean ranges, got {len(self.mean_ranges)}")
        for lo, hi in self.mean_ranges:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise DataError(f"invalid mean range ({lo}, {hi})")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise DataError(f"invalid sigma range ({lo}, {hi})")
        return self

    def draw_segments(self, rng: RandomSource | int | None = None) -> list[GaussianSpec]:
        gen = as_random_source(rng).child(0).generator()
        if self.covariance is Covariance.Identity:
            var = np.ones(self.d)
        else:
            var = gen.uniform(*self.sigma_range, size=self.d) ** 2
        specs, mean = [], np.zeros(self.d)
        for lo, hi in self.mean_ranges:
            draw = gen.uniform(lo, hi, size=self.d)
            mean = mean + draw if self.cumulative else draw
            specs.append(GaussianSpec(mean.copy(), var))
        return specs

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "segment_bounds": list(self.segment_bounds),
            "mean_ranges": [list(r) for r in self.mean_ranges],
            "covariance": self.covariance.value,
            "sigma_range": list(self.sigma_range),
            "cumulative": self.cumulative,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown spec keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise DataError(str(exc)) from None


def generate_synthetic(spec: SyntheticSpec, rng: RandomSource | int | None = None,
                       return_specs: bool = False):
    """Sample ``(series, truth)``; ``rng`` defaults to ``spec.seed``.

    Segment laws come from ``rng.child(0)`` and the rows from ``rng.child(1)``.
    """
    rng = as_random_source(spec.seed if rng is None else rng)
    specs = spec.draw_segments(rng)
    gen = rng.child(1).generator()
    starts = (1,) + spec.segment_bounds[:-1]
    blocks = []
    for k, (a, b) in enumerate(zip(starts, spec.segment_bounds)):
        stop = b if k == len(specs) - 1 else b - 1
        blocks.append(specs[k].sample(stop - a + 1, gen))
    series = TimeSeries(np.vstack(blocks))
    if return_specs:
        return series, spec.truth, specs
    return series, spec.truth


def preset(name: str, **params) -> SyntheticSpec:
    """Named recipes: ``fig2b``, ``fig3b``, ``fig5a`` (``t_star``), ``fig5b`` (``delta_mu``), ``table1``."""
    name = name.lower()
    seed = params.pop("seed", None)
    if name == "fig2b":
        spec = SyntheticSpec(10, (150, 500), ((0.0, 0.4), (0.6, 1.0)), seed=seed)
    elif name == "fig3b":
        spec = SyntheticSpec(10, (150, 450, 600), ((0.0, 0.4), (0.6, 1.0), (1.6, 2.0)), seed=seed)
    elif name == "fig5a":
        t_star = int(params.pop("t_star", 100))
        spec = SyntheticSpec(10, (t_star, 1000), ((-1.0, 1.0), (-2.0, 2.0)), seed=seed)
    elif name == "fig5b":
        dm = float(params.pop("delta_mu", 0.5))
        spec = SyntheticSpec(10, (350, 1000), ((-1.0, 1.0), (dm, dm)), cumulative=True, seed=seed)
    elif name == "table1":
        ranges = ((-1, 1), (-2, 2), (-3, 3), (-4, 4), (-3, 3), (-10, 10), (-20, 20), (-1, 1))
        spec = SyntheticSpec(50, (150, 200, 450, 525, 700, 725, 1200, 2000), ranges,
                             Covariance.DiagonalFromSigmaRange, (1.0, 3.0), seed=seed)
    else:
        raise KeyError(f"unknown preset {name!r}")
    if params:
        raise DataError(f"unknown parameters for preset {name!r}: {sorted(params)}")
    return spec


PRESETS = ("fig2b", "fig3b", "fig5a", "fig5b", "table1")

# ------------------------------------------------------------------- scoring


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int
    tolerance: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               self.tn + other.tn, self.tolerance)


@dataclass(frozen=True)
class Metrics:
    far: float
    mdr: float


def default_delta(n: int) -> int:
    return max(5, math.ceil(0.02 * n))


def match_detections(estimates: Sequence[int], truth: GroundTruth | Sequence[int], delta: int | None = None,
                     n: int | None = None) -> ConfusionCounts:
    """Greedy one-to-one matching of estimates to true changes, in ascending order.

    Each estimate (ascending) takes the nearest unmatched true change within
    ``delta`` (the earlier one on a tie). Negatives are the instants farther
    than ``delta`` from every true change, less the false positives.
    """
    truth_idx = sorted(truth.change_indices if isinstance(truth, GroundTruth) else truth)
    est = sorted(int(e) for e in estimates)
    if n is None:
        n = max([*truth_idx, *est, 1])
    delta = default_delta(n) if delta is None else int(delta)
    if delta < 0:
        raise BoundsError("delta must be non-negative")
    for e in est:
        if not 1 <= e <= n:
            raise BoundsError(f"estimate {e} outside [1, {n}]")
    matched = [False] * len(truth_idx)
    tp = fp = 0
    for e in est:
        best = None
        for j, t in enumerate(truth_idx):
            if not matched[j] and abs(e - t) <= delta and (best is None or abs(e - t) < abs(e - truth_idx[best])):
                best = j
        if best is None:
            fp += 1
        else:
            matched[best] = True
            tp += 1
    fn = len(truth_idx) - tp
    near = np.zeros(n, dtype=bool)
    for t in truth_idx:
        near[max(0, t - 1 - delta) : min(n, t + delta)] = True
    tn = max(0, int(n - near.sum()) - fp)
    return ConfusionCounts(tp, fp, fn, tn, delta)


def far_mdr(counts: ConfusionCounts) -> Metrics:
    far_den = counts.fp + counts.tn
    mdr_den = counts.fn + counts.tp
    return Metrics(counts.fp / far_den if far_den else 0.0, counts.fn / mdr_den if mdr_den else 0.0)


# ----------------------------------------------------------------- accuracy


@dataclass(frozen=True)
class AccuracyRow:
    beta: float
    alpha: float
    exceedance: float

    @property
    def passed(self) -> bool:
        return self.exceedance <= self.beta


def _trial_seed(base: RandomSource, i: int) -> RandomSource:
    return RandomSource(base.seed ^ i)


def _single_change_series(p1: GaussianSpec, p2: GaussianSpec, n: int, t_star: int, gen) -> TimeSeries:
    return TimeSeries(np.vstack([p1.sample(t_star - 1, gen), p2.sample(n - t_star + 1, gen)]))


def oracle_argmax_errors(p1: GaussianSpec, p2: GaussianSpec, n: int, t_star: int, t_split: int,
                         trials: int, a_clip: float = DEFAULT_A_CLIP,
                         rng: RandomSource | int | None = None) -> np.ndarray:
    """``T_hat - T*`` per trial for the clipped oracle statistic (trial ``i`` uses seed ``base ^ i``)."""
    base = as_random_source(rng)
    truth = GroundTruth((t_star,)).validate(n)
    left, right = split_laws([p1, p2], truth, n, t_split)
    errors = np.empty(trials, dtype=np.int64)
    for i in range(trials):
        series = _single_change_series(p1, p2, n, t_star, _trial_seed(base, i).generator())
        stat = compute_cusum(oracle_log_ratio(left, right, series.data), t_split, a_clip, source="oracle")
        errors[i] = argmax_estimator(stat).index - t_star
    return errors


def empirical_accuracy(p1: GaussianSpec, p2: GaussianSpec, n: int, t_star: int, t_split: int,
                       trials: int = 200, betas: Sequence[float] = (0.05, 0.1, 0.2),
                       a_clip: float = DEFAULT_A_CLIP, rng: RandomSource | int | None = None,
                       c_min: float | None = None) -> list[AccuracyRow]:
    """Compare ``P[|T_hat - T*| >= alpha(beta)]`` with ``beta`` over seeded trials."""
    if trials < 100:
        raise BoundsError(f"need at least 100 trials, got {trials}")
    base = as_random_source(rng)
    if c_min is None:
        c_min = min_slope_c(split_geometry(n, t_star, t_split), p1, p2, rng=base.child(0))
    errors = np.abs(oracle_argmax_errors(p1, p2, n, t_star, t_split, trials, a_clip, base))
    rows = []
    for beta in betas:
        bound = theorem_alpha(a_clip, c_min, beta)
        rows.append(AccuracyRow(float(beta), bound.alpha, float(np.mean(errors >= bound.alpha))))
    return rows


@dataclass(frozen=True)
class SlopeCheck:
    """Expected oracle slope in one region: the KL formula against a direct average."""

    region: str
    formula: float
    formula_se: float
    direct: float
    direct_se: float

    @property
    def sign_ok(self) -> bool:
        return self.direct > 0 if self.region == "pre" else self.direct < 0

    @property
    def tolerance_ok(self) -> bool:
        return abs(self.direct - self.formula) <= 3.0 * math.hypot(self.direct_se, self.formula_se)


def check_slopes(p1: GaussianSpec, p2: GaussianSpec, n: int, t_star: int, t_split: int,
                 n_samples: int = 200_000, rng: RandomSource | int | None = None) -> list[SlopeCheck]:
    """Pre- and post-change expected log-ratio, two ways.

    ``formula`` evaluates the KL-divergence expressions of
    :func:`~drecusum.distributions.expected_log_ratio`; ``direct`` samples
    from the pure pre- or post-change law and averages the exact log-ratio
    of the split's left and right laws. Independent draws feed each.
    """
    from .distributions import Region, expected_log_ratio, split_mixtures

    rng = as_random_source(rng)
    geom = split_geometry(n, t_star, t_split)
    left, right = split_mixtures(geom, p1, p2)
    out = []
    for k, (label, region, law) in enumerate((("pre", Region.PreChange, p1), ("post", Region.PostChange, p2))):
        formula, f_se = expected_log_ratio(geom, p1, p2, region, n_samples=n_samples, rng=rng.child(0, k),
                                           return_stderr=True)
        x = law.sample(n_samples, rng.child(1, k).generator())
        vals = oracle_log_ratio(left, right, x)
        out.append(SlopeCheck(label, float(formula), float(f_se), float(np.mean(vals)),
                              float(np.std(vals, ddof=1) / math.sqrt(n_samples))))
    return out


# ---------------------------------------------------------------- harness


class ConfigError(DataError):
    """Schema violation in an experiment config; ``path`` locates the key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_EXPERIMENT_KEYS = {"name", "generator", "detector", "scorer", "seeds", "delta", "output_dir"}
_DETECTOR_KEYS = {
    "name", "pipeline", "model", "objective", "t_split", "splits", "strategy", "window_len", "stride",
    "mode", "z_threshold", "penalty_scale", "min_gap", "smoothing_window", "dre",
}


def _require(obj, kind, path):
    if not isinstance(obj, kind):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(path, f"expected {name}, got {type(obj).__name__}")
    return obj


def _build_detector(spec: dict, path: str):
    from .detect import EnsembleConfig, OnlineConfig, Strategy, WindowMode  # noqa: F401

    _require(spec, dict, path)
    unknown = set(spec) - _DETECTOR_KEYS
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")
    pipeline = spec.get("pipeline", "single")
    if pipeline not in ("single", "multi", "ensemble", "online"):
        raise ConfigError(f"{path}.pipeline", f"unknown pipeline {pipeline!r}")
    model = spec.get("model", "mlp")
    if model not in ("mlp", "kernel", "oracle"):
        raise ConfigError(f"{path}.model", f"unknown model {model!r}")
    dre = None
    if model != "oracle":
        extra = _require(spec.get("dre", {}), dict, f"{path}.dre")
        try:
            dre = config_from_dict({"model": model, "objective": spec.get("objective", "kliep"), **extra})
        except (DataError, ValueError) as exc:
            raise ConfigError(f"{path}.dre", str(exc)) from None
    seg_kwargs = {k: spec[k] for k in ("z_threshold", "penalty_scale", "min_gap", "smoothing_window") if k in spec}
    if pipeline == "online" and "window_len" not in spec:
        raise ConfigError(f"{path}.window_len", "required for the online pipeline")
    if "mode" in spec:
        try:
            WindowMode(spec["mode"])
        except ValueError:
            raise ConfigError(f"{path}.mode", f"unknown mode {spec['mode']!r}") from None
    if "strategy" in spec:
        try:
            Strategy(spec["strategy"])
        except ValueError:
            raise ConfigError(f"{path}.strategy", f"unknown strategy {spec['strategy']!r}") from None
    return {
        "name": spec.get("name", f"{model}-{spec.get('objective', 'kliep') if model != 'oracle' else 'exact'}-{pipeline}"),
        "pipeline": pipeline,
        "model": model,
        "dre": dre,
        "seg": SegmentationConfig(**seg_kwargs),
        "spec": spec,
    }


def _build_generator(spec: dict, path: str) -> list[tuple[str, SyntheticSpec]]:
    _require(spec, dict, path)
    variants = _require(spec.get("variants", [{}]), list, f"{path}.variants")
    out = []
    for v, params in enumerate(variants):
        _require(params, dict, f"{path}.variants[{v}]")
        try:
            if "preset" in spec:
                base = {k: val for k, val in spec.items() if k not in ("preset", "variants")}
                syn = preset(spec["preset"], **base, **params)
                label = spec["preset"] + "".join(f"_{k}{val}" for k, val in params.items())
            elif "spec" in spec:
                syn = SyntheticSpec.from_dict({**_require(spec["spec"], dict, f"{path}.spec"), **params})
                label = "custom" + "".join(f"_{k}{val}" for k, val in params.items())
            else:
                raise ConfigError(path, "needs either 'preset' or 'spec'")
        except KeyError as exc:
            raise ConfigError(f"{path}.preset", str(exc.args[0])) from None
        except ConfigError:
            raise
        except (DataError, ValueError, TypeError) as exc:
            raise ConfigError(f"{path}.variants[{v}]" if len(variants) > 1 else path, str(exc)) from None
        out.append((label, syn))
    return out


def run_detector(det: dict, series: TimeSeries, truth: GroundTruth, segment_specs, rng: RandomSource):
    """Run a built detector; returns ``(indices, cusum_series_list)``."""
    from .detect import (
        EnsembleConfig, OnlineConfig, Strategy, WindowMode, detect_multi, detect_single, emitted_changes,
        ensemble_detect, iter_online,
    )
    from .ratios import OracleRatio

    spec = det["spec"]
    source = OracleRatio(segment_specs, truth) if det["model"] == "oracle" else det["dre"]
    n = series.n
    pipeline = det["pipeline"]
    if pipeline in ("single", "multi"):
        split = SplitConfig(int(spec.get("t_split", n // 2)))
        fn = detect_single if pipeline == "single" else detect_multi
        res = fn(series, split, source, det["seg"], rng)
        return res.indices, [res.cusum]
    if pipeline == "ensemble":
        splits = tuple(spec.get("splits", (n // 4, n // 2, (3 * n) // 4)))
        cfg = EnsembleConfig(splits, Strategy(spec.get("strategy", "majority")))
        res = ensemble_detect(series, cfg, source, det["seg"], rng)
        return res.indices, list(res.cusum)
    cfg = OnlineConfig(int(spec["window_len"]), spec.get("stride"), WindowMode(spec.get("mode", "fixed")))
    results = list(iter_online(series.data, cfg, source, det["seg"], rng))
    return emitted_changes(results), []


def _summary(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "min": None, "max": None}
    return {"mean": float(np.mean(values)), "min": float(np.min(values)), "max": float(np.max(values))}


def run_experiment(experiment_config: str | os.PathLike | dict, progress=None) -> dict:
    """Execute generator x detector combos over seed lists and score them.

    The config is a JSON file (or an already-parsed dict) holding either one
    experiment or ``{"experiments": [...]}``. Each experiment has keys
    ``generator``, ``detector`` (one or a list), ``seeds``, ``delta``,
    ``scorer`` and ``output_dir``. Seed ``s`` generates data from
    ``RandomSource(s)`` and detects with ``RandomSource(s).child(1)``.
    """
    if isinstance(experiment_config, dict):
        config = experiment_config
    else:
        try:
            with open(experiment_config, encoding="utf-8") as fh:
                config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON: {exc}") from None
        except OSError as exc:
            raise DataError(f"cannot read config: {exc}") from None
    _require(config, dict, "$")
    if "experiments" in config:
        experiments = _require(config["experiments"], list, "$.experiments")
        prefix = "$.experiments"
    else:
        experiments, prefix = [config], None

    report = {"experiments": []}
    for e, exp in enumerate(experiments):
        path = f"{prefix}[{e}]" if prefix else "$"
        _require(exp, dict, path)
        unknown = set(exp) - _EXPERIMENT_KEYS
        if unknown:
            raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")
        for key in ("generator", "detector", "seeds"):
            if key not in exp:
                raise ConfigError(f"{path}.{key}", "missing required key")
        generators = _build_generator(exp["generator"], f"{path}.generator")
        det_specs = exp["detector"] if isinstance(exp["detector"], list) else [exp["detector"]]
        detectors = [_build_detector(d, f"{path}.detector" + (f"[{i}]" if isinstance(exp["detector"], list) else ""))
                     for i, d in enumerate(det_specs)]
        seeds = _require(exp["seeds"], list, f"{path}.seeds")
        for i, s in enumerate(seeds):
            if isinstance(s, bool) or not isinstance(s, int) or s < 0:
                raise ConfigError(f"{path}.seeds[{i}]", "seeds must be non-negative integers")
        delta = exp.get("delta")
        if delta is not None and (isinstance(delta, bool) or not isinstance(delta, int) or delta < 0):
            raise ConfigError(f"{path}.delta", "must be a non-negative integer")
        scorer = _require(exp.get("scorer", {"metric": "far_mdr"}), dict, f"{path}.scorer")
        if scorer.get("metric", "far_mdr") != "far_mdr":
            raise ConfigError(f"{path}.scorer.metric", f"unknown metric {scorer.get('metric')!r}")
        out_dir = exp.get("output_dir")
        if out_dir is not None:
            _require(out_dir, str, f"{path}.output_dir")
            os.makedirs(out_dir, exist_ok=True)

        entry = {"name": exp.get("name", f"experiment{e}"), "runs": []}
        for label, syn in generators:
            for det in detectors:
                per_seed, pooled = [], None
                for s in seeds:
                    root = RandomSource(s)
                    series, truth, seg_specs = generate_synthetic(syn, root, return_specs=True)
                    d = default_delta(series.n) if delta is None else delta
                    indices, cusums = run_detector(det, series, truth, seg_specs, root.child(1))
                    counts = match_detections(indices, truth, d, series.n)
                    m = far_mdr(counts)
                    pooled = counts if pooled is None else pooled + counts
                    per_seed.append({"seed": s, "detections": [int(i) for i in indices], "far": m.far,
                                     "mdr": m.mdr, "tp": counts.tp, "fp": counts.fp, "fn": counts.fn,
                                     "tn": counts.tn})
                    if out_dir is not None:
                        for c in cusums:
                            name = f"{label}_{det['name']}_seed{s}_split{c.t_split}.csv"
                            write_cusum_csv(c, os.path.join(out_dir, name))
                    if progress is not None:
                        progress(label, det["name"], s, m)
                pooled_m = far_mdr(pooled) if pooled is not None else Metrics(0.0, 0.0)
                entry["runs"].append({
                    "generator": label, "detector": det["name"], "delta": default_delta(syn.n) if delta is None else delta,
                    "per_seed": per_seed,
                    "far": _summary([r["far"] for r in per_seed]),
                    "mdr": _summary([r["mdr"] for r in per_seed]),
                    "pooled": {"far": pooled_m.far, "mdr": pooled_m.mdr},
                })
        report["experiments"].append(entry)
    return report
