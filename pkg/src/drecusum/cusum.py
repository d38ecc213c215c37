"""The DRE-CUSUM statistic and the slope-change machinery built on it.

``S(t)`` accumulates log density ratios; its slope is positive while the data
look like the left half of the split and negative while they look like the
right half, so change points show up as vertices of a piecewise-linear
trajectory. Indices are 1-based and a reported change index is the vertex,
i.e. the last sample of the earlier regime.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import BoundsError, ChangePointEstimate, DataError

DEFAULT_A_CLIP = 10.0
DEFAULT_Z_THRESHOLD = 8.0
DEFAULT_HOLDOUT_LEVEL = 0.01
MIN_HOLDOUT_ROWS = 5


@dataclass
class CusumSeries:
    values: np.ndarray
    source: str = "estimated"
    t_split: int | None = None
    a_clip: float = DEFAULT_A_CLIP

    @property
    def n(self) -> int:
        return len(self.values)

    def increments(self) -> np.ndarray:
        return np.diff(self.values, prepend=0.0)


@dataclass
class SlopeChange:
    index: int
    slope_before: float
    slope_after: float
    magnitude: float
    z_score: float = float("inf")

    def to_estimate(self, verified: bool = False) -> ChangePointEstimate:
        return ChangePointEstimate(self.index, self.slope_before, self.slope_after,
                                   self.magnitude, verified)


@dataclass
class SegmentationConfig:
    """Knobs for slope-change detection; ``None`` means "derive from n".

    ``min_magnitude = 0`` selects the automatic significance rule: a vertex
    survives only if the slope difference exceeds ``z_threshold`` standard
    errors of the increment noise.

    ``holdout_level`` applies only to learned ratios: the log-ratios of rows
    held out of training must differ across the vertex with a Welch test
    p-value at or below this level.
    """

    smoothing_window: int | None = None
    min_gap: int | None = None
    penalty_scale: float = 3.0
    min_magnitude: float = 0.0
    z_threshold: float = DEFAULT_Z_THRESHOLD
    holdout_level: float = DEFAULT_HOLDOUT_LEVEL

    def resolved(self, n: int) -> "SegmentationConfig":
        sw = self.smoothing_window if self.smoothing_window is not None else max(5, n // 100)
        mg = self.min_gap if self.min_gap is not None else max(1, n // 50)
        if sw < 1 or mg < 1:
            raise BoundsError("smoothing_window and min_gap must be >= 1")
        return SegmentationConfig(sw, mg, self.penalty_scale, self.min_magnitude, self.z_threshold,
                                  self.holdout_level)


def compute_cusum(log_ratios, t_split: int | None = None, a_clip: float = DEFAULT_A_CLIP,
                  source: str = "estimated") -> CusumSeries:
    """Running sum of log-ratios after clipping each to ``[-a_clip, a_clip]``."""
    r = np.asarray(log_ratios, dtype=np.float64).ravel()
    if r.size == 0:
        raise DataError("need at least one log-ratio")
    if not np.all(np.isfinite(r)):
        raise DataError("log-ratios must be finite")
    if a_clip is not None:
        r = np.clip(r, -a_clip, a_clip)
    return CusumSeries(np.cumsum(r), source, t_split, a_clip)


def _fit_slope(t: np.ndarray, y: np.ndarray) -> float:
    if len(t) < 2:
        return float("nan")
    tc = t - t.mean()
    return float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))


def local_slopes(values: np.ndarray, index: int, width: int) -> tuple[float, float]:
    """Least-squares slopes over ``width`` steps ending at and starting from ``index``."""
    n = len(values)
    t = np.arange(1, n + 1, dtype=np.float64)
    lo = max(1, index - width)
    hi = min(n, index + width)
    before = _fit_slope(t[lo - 1 : index], values[lo - 1 : index])
    after = _fit_slope(t[index - 1 : hi], values[index - 1 : hi])
    return before, after


def argmax_estimator(series: CusumSeries, min_gap: int | None = None) -> ChangePointEstimate:
    """Smallest index at which ``S`` attains its maximum.

    A maximum at either end of the series carries no interior peak and is
    flagged ``degenerate``.
    """
    values = np.asarray(series.values)
    if values.size == 0:
        raise DataError("empty CUSUM series")
    n = len(values)
    idx = int(np.argmax(values)) + 1
    width = min_gap if min_gap is not None else max(1, n // 50)
    before, after = local_slopes(values, idx, max(width, 1))
    mag = abs(after - before) if math.isfinite(before) and math.isfinite(after) else 0.0
    return ChangePointEstimate(idx, before, after, mag, degenerate=idx in (1, n))


# ------------------------------------------------------- piecewise-linear fit


class _Prefix:
    """O(1) least-squares line fits on any index range via prefix sums."""

    def __init__(self, y: np.ndarray):
        t = np.arange(1, len(y) + 1, dtype=np.float64)
        z = np.zeros(1)
        self.c = np.concatenate([z, np.cumsum(np.ones_like(t))])
        self.st = np.concatenate([z, np.cumsum(t)])
        self.stt = np.concatenate([z, np.cumsum(t * t)])
        self.sy = np.concatenate([z, np.cumsum(y)])
        self.syy = np.concatenate([z, np.cumsum(y * y)])
        self.sty = np.concatenate([z, np.cumsum(t * y)])

    def fit(self, a: int, b: int) -> tuple[float, float]:
        """(SSE, slope) of the best line over 1-based rows ``a..b``."""
        m = self.c[b] - self.c[a - 1]
        st = self.st[b] - self.st[a - 1]
        stt = self.stt[b] - self.stt[a - 1]
        sy = self.sy[b] - self.sy[a - 1]
        syy = self.syy[b] - self.syy[a - 1]
        sty = self.sty[b] - self.sty[a - 1]
        ctt = stt - st * st / m
        cyy = syy - sy * sy / m
        cty = sty - st * sy / m
        if m < 2 or ctt <= 0:
            return max(cyy, 0.0), float("nan")
        slope = cty / ctt
        return max(cyy - slope * cty, 0.0), slope

    def sse(self, a: int, b: int) -> float:
        return self.fit(a, b)[0]


def _smooth(values: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return values.copy()
    half = width // 2
    csum = np.concatenate([[0.0], np.cumsum(values)])
    n = len(values)
    idx = np.arange(n)
    lo = np.maximum(0, idx - half)
    hi = np.minimum(n, idx + half + 1)
    return (csum[hi] - csum[lo]) / (hi - lo)


def increment_noise(values: np.ndarray) -> float:
    """Scale of the per-step increments, from their first differences.

    Differencing removes piecewise-constant drift, so slope changes barely
    move the estimate. The plain standard deviation (not a MAD) keeps heavy
    tails from understating the noise.
    """
    r = np.diff(np.asarray(values, dtype=np.float64), prepend=0.0)
    if len(r) < 3:
        return 0.0
    return float(np.std(np.diff(r)) / math.sqrt(2.0))


def _bottom_up(prefix: _Prefix, n: int, min_gap: int, penalty: float) -> list[int]:
    """Segment ends (1-based, inclusive) after greedy bottom-up merging."""
    ends = list(range(min_gap, n + 1, min_gap))
    if ends[-1] != n:
        if n - ends[-1] < min_gap and len(ends) > 1:
            ends[-1] = n
        else:
            ends.append(n)
    starts = [1] + [e + 1 for e in ends[:-1]]
    sse = [prefix.sse(s, e) for s, e in zip(starts, ends)]

    def merge_cost(k):
        return prefix.sse(starts[k], ends[k + 1]) - sse[k] - sse[k + 1]

    costs = [merge_cost(k) for k in range(len(ends) - 1)]
    while costs:
        k = int(np.argmin(costs))
        if costs[k] > penalty:
            break
        sse[k] = prefix.sse(starts[k], ends[k + 1])
        ends[k] = ends[k + 1]
        del starts[k + 1], ends[k + 1], sse[k + 1], costs[k]
        if k < len(costs):
            costs[k] = merge_cost(k)
        if k > 0:
            costs[k - 1] = merge_cost(k - 1)
    return ends


def _refine(prefix: _Prefix, ends: list[int], radius: int) -> list[int]:
    """Move each vertex within ``radius`` to the best two-line fit of its neighbours.

    The vertex is shared by both lines, so on a noiseless trajectory only the
    true vertex fits exactly.
    """
    ends = list(ends)
    for k in range(len(ends) - 1):
        a = 1 if k == 0 else ends[k - 1]
        c = ends[k + 1]
        lo = max(a + 1, ends[k] - radius)
        hi = min(c - 1, ends[k] + radius)
        best, best_b = None, ends[k]
        for b in range(lo, hi + 1):
            cost = prefix.sse(a, b) + prefix.sse(b, c)
            if best is None or cost < best - 1e-12 * (1.0 + abs(best)):
                best, best_b = cost, b
        ends[k] = best_b
    return ends


def _vertex_stats(prefix: _Prefix, ends: list[int], k: int, noise: float) -> SlopeChange:
    a = 1 if k == 0 else ends[k - 1]
    b, c = ends[k], ends[k + 1]
    _, s1 = prefix.fit(a, b)
    _, s2 = prefix.fit(b, c)
    mag = abs(s2 - s1) if math.isfinite(s1) and math.isfinite(s2) else 0.0
    l1, l2 = b - a + 1, c - b
    se = noise * math.sqrt(1.2 * (1.0 / l1 + 1.0 / l2))
    if se > 0:
        z = mag / se
    else:
        z = float("inf") if mag > 1e-9 * (1.0 + abs(s1) + abs(s2)) else 0.0
    return SlopeChange(b, s1, s2, mag, z)


def detect_slope_changes(series: CusumSeries, config: SegmentationConfig | None = None,
                         near_split_filter: bool = True) -> list[SlopeChange]:
    """Vertices of a bottom-up piecewise-linear fit to ``S``.

    Segments start ``min_gap`` long and the cheapest adjacent pair is merged
    until a merge would raise the SSE by more than
    ``penalty_scale * sigma^2 * ln(n)`` (``sigma^2`` being the residual
    variance of one global line). Vertices are then snapped to the best
    two-line split within ``min_gap`` on the raw series, insignificant ones
    are merged away, and vertices hugging the ends or the split are dropped
    when an interior vertex at least as strong exists. Verification turns
    the split part off (``near_split_filter=False``) because there the split
    sits on the candidate by construction.
    """
    values = np.asarray(series.values, dtype=np.float64)
    n = len(values)
    cfg = (config or SegmentationConfig()).resolved(n)
    g = cfg.min_gap
    if n < 3 * g:
        raise DataError(f"series too short for slope detection: n={n} < 3 * min_gap={3 * g}")

    raw = _Prefix(values)
    global_sse = raw.sse(1, n)
    scale = float(np.dot(values, values)) + 1.0
    if global_sse <= 1e-12 * scale:
        return []
    sigma2 = global_sse / n
    penalty = cfg.penalty_scale * sigma2 * math.log(n)

    smooth = _Prefix(_smooth(values, cfg.smoothing_window))
    ends = _bottom_up(smooth, n, g, penalty)
    ends = _refine(raw, ends, g)
    noise = increment_noise(values)

    def passes(sc: SlopeChange) -> bool:
        if cfg.min_magnitude > 0:
            return sc.magnitude >= cfg.min_magnitude
        return sc.z_score >= cfg.z_threshold

    while len(ends) > 1:
        stats = [_vertex_stats(raw, ends, k, noise) for k in range(len(ends) - 1)]
        failing = [k for k, sc in enumerate(stats) if not passes(sc)]
        if not failing:
            break
        weakest = min(failing, key=lambda k: (stats[k].z_score, stats[k].magnitude))
        del ends[weakest]
    changes = [_vertex_stats(raw, ends, k, noise) for k in range(len(ends) - 1)]

    def near_boundary(idx: int) -> bool:
        if idx - 1 < g or n - idx < g:
            return True
        return near_split_filter and series.t_split is not None and abs(idx - series.t_split) < g

    interior = [sc for sc in changes if not near_boundary(sc.index)]
    return [
        sc for sc in changes
        if not near_boundary(sc.index) or not any(o.magnitude >= sc.magnitude for o in interior)
    ]


def holdout_contrast(series: CusumSeries, holdout: np.ndarray, vertices: list[int], k: int) -> float:
    """Two-sided Welch p-value for held-out increments before vs after vertex ``k``.

    The two samples are the held-out rows of the segments on either side of
    ``vertices[k]`` (bounded by the neighbouring vertices or the series
    ends). Fewer than ``MIN_HOLDOUT_ROWS`` rows on a side gives 1.0: a
    handful of points makes the variance estimate too unstable to trust.
    """
    r = series.increments()
    n = len(r)
    c = vertices[k]
    a = vertices[k - 1] + 1 if k > 0 else 1
    b = vertices[k + 1] if k + 1 < len(vertices) else n
    mask = np.asarray(holdout, dtype=bool)
    x = r[a - 1 : c][mask[a - 1 : c]]
    y = r[c:b][mask[c:b]]
    if len(x) < MIN_HOLDOUT_ROWS or len(y) < MIN_HOLDOUT_ROWS:
        return 1.0
    vx, vy = x.var(ddof=1) / len(x), y.var(ddof=1) / len(y)
    diff = abs(float(x.mean() - y.mean()))
    if vx + vy == 0.0:
        return 0.0 if diff > 0 else 1.0
    return float(stats.ttest_ind(x, y, equal_var=False).pvalue)


def write_cusum_csv(series: CusumSeries, path: str | os.PathLike) -> None:
    """Two columns ``t,S`` with a header row; ``t`` is 1-based."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "S"])
        for t, v in enumerate(series.values, start=1):
            writer.writerow([t, repr(float(v))])
