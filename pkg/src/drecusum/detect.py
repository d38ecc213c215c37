"""Detection pipelines: single change, multiple changes, split ensembles, online windows."""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import (
    BoundsError,
    ChangePointEstimate,
    DataError,
    RandomSource,
    SplitConfig,
    TimeSeries,
    as_random_source,
    check_split,
)
from .cusum import (
    CusumSeries,
    SegmentationConfig,
    SlopeChange,
    argmax_estimator,
    compute_cusum,
    detect_slope_changes,
    holdout_contrast,
    write_cusum_csv,
)
from .ratios import as_ratio_source, describe_source


@dataclass
class DetectionResult:
    change_points: list[ChangePointEstimate]
    cusum: CusumSeries | list[CusumSeries] | None
    config_echo: dict = field(default_factory=dict)
    seed: int = 0
    t_splits: list[int] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def indices(self) -> list[int]:
        return [cp.index for cp in self.change_points]

    def to_dict(self) -> dict:
        return {
            "change_points": [
                {"index": int(cp.index), "magnitude": float(cp.magnitude), "verified": bool(cp.verified)}
                for cp in self.change_points
            ],
            "t_splits": [int(t) for t in self.t_splits],
            "seed": int(self.seed),
            "config": self.config_echo,
            "diagnostics": _jsonable(self.diagnostics),
        }

    def write_json(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_cusum(self, path: str | os.PathLike) -> list[str]:
        """Write one ``t,S`` CSV per split; returns the paths written."""
        series = self.cusum if isinstance(self.cusum, list) else [self.cusum]
        series = [s for s in series if s is not None]
        if len(series) == 1:
            write_cusum_csv(series[0], path)
            return [str(path)]
        root, ext = os.path.splitext(str(path))
        paths = []
        for s in series:
            p = f"{root}_split{s.t_split}{ext or '.csv'}"
            write_cusum_csv(s, p)
            paths.append(p)
        return paths


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, ChangePointEstimate):
        return obj.to_dict()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _echo(source, seg: SegmentationConfig, **extra) -> dict:
    out = {"dre": describe_source(source), "segmentation": {
        "smoothing_window": seg.smoothing_window, "min_gap": seg.min_gap,
        "penalty_scale": seg.penalty_scale, "min_magnitude": seg.min_magnitude,
        "z_threshold": seg.z_threshold}}
    out.update(extra)
    return out


def verification_split(candidate: int, n: int, min_gap: int) -> int:
    """Split used to verify ``candidate``: the candidate itself, never ``n // 2``."""
    t = int(candidate)
    if t == n // 2:
        t = t + min_gap if t + min_gap <= n - 1 else t - min_gap
    return min(max(t, 2), n - 1)


def _statistic(series: TimeSeries, t_split: int, source, seg: SegmentationConfig, rng: RandomSource,
               verifying: bool = False):
    log_ratios = source(series, t_split, rng)
    stat = compute_cusum(log_ratios, t_split, source=getattr(source, "source", "estimated"))
    return stat, detect_slope_changes(stat, seg, near_split_filter=not verifying)


def _verifier(source):
    make = getattr(source, "verifier", None)
    return make() if make is not None else source


def _holdout_ok(stat: CusumSeries, source, changes: list[SlopeChange], k: int, seg: SegmentationConfig) -> bool:
    """Out-of-sample support for vertex ``k``; sources without a holdout always pass."""
    mask = getattr(source, "last_holdout", None)
    if mask is None or len(mask) != stat.n:
        return True
    return holdout_contrast(stat, mask, [c.index for c in changes], k) <= seg.holdout_level


def verify_change(series: TimeSeries, candidate: int, dre_config=None, rng: RandomSource | int | None = None,
                  seg_config: SegmentationConfig | None = None) -> tuple[bool, ChangePointEstimate]:
    """Re-split at ``candidate`` and check it is the only slope change left.

    Verified when the new statistic has exactly one vertex, it lies within
    ``min_gap`` of the new argmax and, for learned ratios, the rows held out
    of training differ across it (``seg_config.holdout_level``). The refined
    estimate is that argmax.
    """
    n = series.n
    if not 1 < candidate < n:
        raise BoundsError(f"candidate {candidate} is not strictly inside [1, {n}]")
    seg = (seg_config or SegmentationConfig()).resolved(n)
    source = _verifier(as_ratio_source(dre_config))
    t_verify = verification_split(candidate, n, seg.min_gap)
    stat, changes = _statistic(series, t_verify, source, seg, as_random_source(rng), verifying=True)
    peak = argmax_estimator(stat, seg.min_gap)
    verified = (len(changes) == 1 and abs(changes[0].index - peak.index) <= seg.min_gap
                and not peak.degenerate and _holdout_ok(stat, source, changes, 0, seg))
    if verified:
        only = changes[0]
        refined = ChangePointEstimate(peak.index, only.slope_before, only.slope_after, only.magnitude, True)
    else:
        refined = ChangePointEstimate(peak.index, peak.slope_before, peak.slope_after, peak.magnitude,
                                      False, peak.degenerate)
    return verified, refined


def _supported(stat: CusumSeries, source, changes: list[SlopeChange], seg: SegmentationConfig) -> list[SlopeChange]:
    """Drop vertices without out-of-sample support before paying for verification."""
    return [c for k, c in enumerate(changes) if _holdout_ok(stat, source, changes, k, seg)]


def _candidates(stat: CusumSeries, changes: list[SlopeChange], extra: Sequence[int], min_gap: int,
                fallback: bool = True) -> list[SlopeChange]:
    """Vertices plus requested extra splits.

    With ``fallback`` and nothing else to check, the argmax stands in,
    provided it is at least ``min_gap`` from both ends.
    """
    out = list(changes)
    n = stat.n
    for t in extra:
        if not any(abs(c.index - t) <= min_gap for c in out) and 1 < t < n:
            out.append(SlopeChange(int(t), float("nan"), float("nan"), 0.0, 0.0))
    if not out and fallback:
        peak = argmax_estimator(stat, min_gap)
        if min_gap < peak.index <= n - min_gap:
            out.append(SlopeChange(peak.index, peak.slope_before, peak.slope_after, peak.magnitude, 0.0))
    return sorted(out, key=lambda c: c.index)


def _dedupe(points: list[ChangePointEstimate], gap: int) -> list[ChangePointEstimate]:
    """Keep the strongest estimate among any group closer than ``gap``; sort ascending."""
    kept: list[ChangePointEstimate] = []
    for cp in sorted(points, key=lambda c: -c.magnitude):
        if all(abs(cp.index - k.index) >= gap for k in kept):
            kept.append(cp)
    return sorted(kept, key=lambda c: c.index)


def detect_single(series: TimeSeries, split: SplitConfig | None = None, dre_config=None,
                  seg_config: SegmentationConfig | None = None,
                  rng: RandomSource | int | None = None) -> DetectionResult:
    """Train at the split, list slope changes, keep those that verify."""
    rng = as_random_source(rng)
    n = series.n
    split = (split or SplitConfig.default(n)).validate(n)
    seg = (seg_config or SegmentationConfig()).resolved(n)
    source = as_ratio_source(dre_config)

    stat, changes = _statistic(series, split.t_split, source, seg, rng.child(0))
    candidates = _candidates(stat, _supported(stat, source, changes, seg), split.verification_splits,
                             seg.min_gap, fallback=not changes)
    verified, rejected = [], []
    for i, cand in enumerate(candidates):
        ok, refined = verify_change(series, cand.index, source, rng.child(1, i), seg)
        (verified if ok else rejected).append((cand, refined))

    points = _dedupe([r for _, r in verified], seg.min_gap)
    diagnostics = {"candidates": [c.index for c in candidates]}
    if not points and candidates:
        strongest = max(candidates, key=lambda c: (c.z_score, c.magnitude))
        diagnostics["strongest_unverified"] = strongest.to_estimate(False)
    return DetectionResult(points, stat, _echo(source, seg, pipeline="single"), rng.seed,
                           [split.t_split], diagnostics)


def detect_multi(series: TimeSeries, split: SplitConfig | None = None, dre_config=None,
                 seg_config: SegmentationConfig | None = None, rng: RandomSource | int | None = None,
                 vote_tolerance: int | None = None) -> DetectionResult:
    """All slope changes at one split, each confirmed by re-splitting at it.

    A candidate survives when the re-split statistic again shows a vertex
    within ``vote_tolerance`` of it (with out-of-sample support for learned
    ratios, as in :func:`verify_change`). If that statistic has a single vertex the
    reported index is its argmax (matching :func:`detect_single`); otherwise
    it is the matched vertex.
    """
    rng = as_random_source(rng)
    n = series.n
    split = (split or SplitConfig.default(n)).validate(n)
    seg = (seg_config or SegmentationConfig()).resolved(n)
    tol = seg.min_gap if vote_tolerance is None else int(vote_tolerance)
    source = as_ratio_source(dre_config)

    stat, changes = _statistic(series, split.t_split, source, seg, rng.child(0))
    candidates = _candidates(stat, _supported(stat, source, changes, seg), split.verification_splits,
                             seg.min_gap, fallback=False)
    checker = _verifier(source)
    kept = []
    for i, cand in enumerate(candidates):
        t_verify = verification_split(cand.index, n, seg.min_gap)
        vstat, vchanges = _statistic(series, t_verify, checker, seg, rng.child(1, i), verifying=True)
        matches = [k for k, c in enumerate(vchanges) if abs(c.index - cand.index) <= tol]
        if not matches:
            continue
        k_best = min(matches, key=lambda k: abs(vchanges[k].index - cand.index))
        best = vchanges[k_best]
        if not _holdout_ok(vstat, checker, vchanges, k_best, seg):
            continue
        peak = argmax_estimator(vstat, seg.min_gap)
        if len(vchanges) == 1 and abs(best.index - peak.index) <= seg.min_gap and not peak.degenerate:
            index = peak.index
        else:
            index = best.index
        kept.append(ChangePointEstimate(index, best.slope_before, best.slope_after, best.magnitude, True))

    points = _dedupe(kept, seg.min_gap)
    diagnostics = {"candidates": [c.index for c in candidates]}
    return DetectionResult(points, stat, _echo(source, seg, pipeline="multi", vote_tolerance=tol),
                           rng.seed, [split.t_split], diagnostics)


# ------------------------------------------------------------------ ensemble


class Strategy(str, enum.Enum):
    MajorityVote = "majority"
    WeightedSum = "weighted"


@dataclass
class EnsembleConfig:
    split_points: tuple[int, ...]
    strategy: Strategy = Strategy.MajorityVote
    vote_tolerance: int | None = None
    vote_threshold: int | None = None

    def validate(self, n: int) -> "EnsembleConfig":
        if len(self.split_points) < 2:
            raise BoundsError("an ensemble needs at least two split points")
        for t in self.split_points:
            check_split(t, n)
        return self

    @classmethod
    def default(cls, n: int, **kwargs) -> "EnsembleConfig":
        return cls((n // 4, n // 2, (3 * n) // 4), **kwargs)


def _cluster(entries: list[tuple[int, float, int]], tol: int) -> list[list[tuple[int, float, int]]]:
    clusters: list[list[tuple[int, float, int]]] = []
    for entry in sorted(entries):
        if clusters and entry[0] - clusters[-1][-1][0] <= tol and entry[0] - clusters[-1][0][0] <= 2 * tol:
            clusters[-1].append(entry)
        else:
            clusters.append([entry])
    return clusters


def ensemble_detect(series: TimeSeries, cfg: EnsembleConfig, dre_config=None,
                    seg_config: SegmentationConfig | None = None,
                    rng: RandomSource | int | None = None) -> DetectionResult:
    """Run :func:`detect_multi` per split and combine the candidates.

    Every member draws from the same random source, so identical splits give
    identical members.
    """
    rng = as_random_source(rng)
    n = series.n
    cfg.validate(n)
    seg = (seg_config or SegmentationConfig()).resolved(n)
    tol = seg.min_gap if cfg.vote_tolerance is None else int(cfg.vote_tolerance)
    r = len(cfg.split_points)
    threshold = math.ceil(r / 2) if cfg.vote_threshold is None else int(cfg.vote_threshold)
    source = as_ratio_source(dre_config)

    members = [detect_multi(series, SplitConfig(t), source, seg, rng, tol) for t in cfg.split_points]
    entries = [(cp.index, cp.magnitude, k) for k, m in enumerate(members) for cp in m.change_points]
    clusters = _cluster(entries, tol)

    strategy = Strategy(cfg.strategy)
    if strategy is Strategy.MajorityVote:
        keep = [c for c in clusters if len({k for _, _, k in c}) >= threshold]
    else:
        scores = [sum(m for _, m, _ in c) for c in clusters]
        cut = float(np.median(scores)) if scores else 0.0
        keep = [c for c, s in zip(clusters, scores) if s >= cut]

    points = []
    for c in keep:
        idx = int(math.floor(np.mean([i for i, _, _ in c]) + 0.5))
        mag = float(np.mean([m for _, m, _ in c]))
        points.append(ChangePointEstimate(idx, float("nan"), float("nan"), mag, True))
    points.sort(key=lambda cp: cp.index)
    diagnostics = {
        "votes": [{"indices": [i for i, _, _ in c], "supporters": len({k for _, _, k in c})} for c in clusters],
        "members": [m.indices for m in members],
    }
    echo = _echo(source, seg, pipeline="ensemble", strategy=strategy.value, vote_tolerance=tol,
                 vote_threshold=threshold)
    return DetectionResult(points, [m.cusum for m in members], echo, rng.seed,
                           list(cfg.split_points), diagnostics)


# -------------------------------------------------------------------- online


class WindowMode(str, enum.Enum):
    FixedWindow = "fixed"
    AdaptiveWindow = "adaptive"


@dataclass
class OnlineConfig:
    window_len: int
    stride: int | None = None
    mode: WindowMode = WindowMode.FixedWindow
    vote_tolerance: int | None = None

    def resolved(self) -> "OnlineConfig":
        stride = self.window_len // 2 if self.stride is None else int(self.stride)
        if stride < 1:
            raise BoundsError("stride must be >= 1")
        if self.window_len < 8:
            raise BoundsError("window_len must be at least 8")
        return OnlineConfig(int(self.window_len), stride, WindowMode(self.mode), self.vote_tolerance)


def iter_online(feed: Iterable, cfg: OnlineConfig, dre_config=None,
                seg_config: SegmentationConfig | None = None,
                rng: RandomSource | int | None = None) -> Iterator[DetectionResult]:
    """Yield one result per analysed window, change indices global and 1-based.

    Only new change points are reported: a detection within the vote
    tolerance of an earlier emission is dropped. Window ``k`` draws from
    ``rng.child(k)``.
    """
    rng = as_random_source(rng)
    cfg = cfg.resolved()
    L = cfg.window_len
    seg = seg_config or SegmentationConfig()
    gap = seg.resolved(L).min_gap
    if L < 4 * gap:
        raise BoundsError(f"window_len {L} must be at least 4 * min_gap ({4 * gap})")
    tol = gap if cfg.vote_tolerance is None else int(cfg.vote_tolerance)
    source = as_ratio_source(dre_config)

    buffer: list[np.ndarray] = []
    buffer_start = 1  # global index of buffer[0]
    window_start = 1
    emitted: list[int] = []
    k = 0
    for row in feed:
        buffer.append(np.atleast_1d(np.asarray(row, dtype=np.float64)))
        while buffer_start + len(buffer) - 1 >= window_start + L - 1:
            lo = window_start - buffer_start
            window = TimeSeries(np.vstack(buffer[lo : lo + L]))
            src = source.shifted(window_start - 1) if hasattr(source, "shifted") else source
            local = detect_multi(window, SplitConfig(L // 2), src, seg, rng.child(k), tol)
            fresh = []
            for cp in local.change_points:
                g_idx = cp.index + window_start - 1
                if all(abs(g_idx - e) > tol for e in emitted):
                    fresh.append(ChangePointEstimate(g_idx, cp.slope_before, cp.slope_after, cp.magnitude,
                                                     cp.verified))
            emitted.extend(cp.index for cp in fresh)
            local.change_points = fresh
            local.diagnostics["window"] = [window_start, window_start + L - 1]
            local.config_echo["online"] = {"window_len": L, "stride": cfg.stride, "mode": cfg.mode.value}
            yield local
            k += 1
            if cfg.mode is WindowMode.AdaptiveWindow and fresh:
                next_start = max(cp.index for cp in fresh) + 1
                window_start = max(next_start, window_start + 1)
            else:
                window_start += cfg.stride
            drop = window_start - buffer_start
            if drop > 0:
                del buffer[:drop]
                buffer_start = window_start


def online_detect(feed: Iterable, cfg: OnlineConfig, dre_config=None,
                  seg_config: SegmentationConfig | None = None,
                  rng: RandomSource | int | None = None) -> list[DetectionResult]:
    return list(iter_online(feed, cfg, dre_config, seg_config, rng))


def emitted_changes(results: Sequence[DetectionResult]) -> list[int]:
    """All change indices emitted by an online run, ascending."""
    return sorted(cp.index for r in results for cp in r.change_points)


def check_series(series) -> TimeSeries:
    if isinstance(series, TimeSeries):
        return series
    try:
        return TimeSeries(np.asarray(series, dtype=np.float64))
    except (TypeError, ValueError) as exc:
        raise DataError(str(exc)) from None
