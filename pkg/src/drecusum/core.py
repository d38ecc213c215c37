"""Shared domain types: time series, split geometry, estimates, ground truth.

Time indices are 1-based throughout the public API: ``t = 1`` is the first
row of the data matrix. A change at index ``T`` means rows ``1..T-1`` follow
the old regime and rows ``T..n`` the new one. Splitting at ``t_split`` puts
rows ``1..t_split-1`` on the left and ``t_split..n`` on the right.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed input data (CSV content, ground-truth files, shapes)."""


class BoundsError(ValueError):
    """An index or parameter lies outside its admissible range."""


class DegenerateProblemError(ValueError):
    """The problem has no detectable change (e.g. identical distributions)."""


class TrainingError(RuntimeError):
    """Density-ratio training diverged or produced non-finite values."""


@dataclass(frozen=True)
class RandomSource:
    """Seed holder from which every stochastic operation draws.

    Two sources with the same seed yield identical streams. Independent
    sub-streams come from :meth:`child`, which hashes the key path through
    :class:`numpy.random.SeedSequence` so that children never collide with
    each other or with small-integer neighbours of the parent seed.
    """

    seed: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise BoundsError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        object.__setattr__(self, "seed", int(self.seed))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys: int) -> "RandomSource":
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in keys))
        return RandomSource(int(ss.generate_state(1, dtype=np.uint64)[0]))


def as_random_source(rng: RandomSource | int | None) -> RandomSource:
    if rng is None:
        return RandomSource(0)
    if isinstance(rng, RandomSource):
        return rng
    return RandomSource(int(rng))


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """An ``n x d`` matrix of finite observations; rows are time steps."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise DataError(f"time series must be 1-D or 2-D, got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise DataError(f"time series needs at least 2 samples, got {arr.shape[0]}")
        if arr.shape[1] < 1:
            raise DataError("time series needs at least one column")
        if not np.all(np.isfinite(arr)):
            row, col = np.argwhere(~np.isfinite(arr))[0]
            raise DataError(f"non-finite value at t={row + 1}, column {col + 1}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.n

    def window(self, start: int, stop: int) -> "TimeSeries":
        """Rows ``start..stop`` inclusive, 1-based."""
        return TimeSeries(self.data[start - 1 : stop])

    def left(self, t_split: int) -> np.ndarray:
        return self.data[: t_split - 1]

    def right(self, t_split: int) -> np.ndarray:
        return self.data[t_split - 1 :]

    def __eq__(self, other):
        return isinstance(other, TimeSeries) and np.array_equal(self.data, other.data)

    __hash__ = None


def check_split(t_split: int, n: int) -> int:
    t_split = int(t_split)
    if not 2 <= t_split <= n - 1:
        raise BoundsError(f"t_split must lie in [2, {n - 1}] for n={n}, got {t_split}")
    return t_split


@dataclass(frozen=True)
class SplitConfig:
    t_split: int
    verification_splits: tuple[int, ...] = ()

    def validate(self, n: int) -> "SplitConfig":
        check_split(self.t_split, n)
        for t in self.verification_splits:
            check_split(t, n)
        return self

    @classmethod
    def default(cls, n: int) -> "SplitConfig":
        return cls(t_split=n // 2)


class Side(enum.Enum):
    SplitLeftOfChange = "left"
    SplitRightOfChange = "right"


@dataclass(frozen=True)
class SplitGeometry:
    """Where the split sits relative to a single change.

    ``alpha1`` is the fraction of the right block drawn after the change
    (defined when ``t_split <= t_star``); ``alpha2`` is the share of the left
    block drawn before it (defined when ``t_split >= t_star``).
    """

    n: int
    t_star: int
    t_split: int
    side: Side
    alpha1: float | None
    alpha2: float | None

    @property
    def mixing_weight(self) -> float:
        """Weight of the pre-change law inside whichever half is mixed."""
        if self.side is Side.SplitLeftOfChange:
            return 1.0 - self.alpha1
        return self.alpha2


def split_geometry(n: int, t_star: int, t_split: int) -> SplitGeometry:
    n, t_star, t_split = int(n), int(t_star), int(t_split)
    if n < 3:
        raise BoundsError(f"n must be at least 3, got {n}")
    if not 1 <= t_star <= n:
        raise BoundsError(f"t_star must lie in [1, {n}], got {t_star}")
    check_split(t_split, n)
    alpha1 = (n - t_star) / (n - t_split) if t_split <= t_star else None
    alpha2 = t_star / t_split if t_split >= t_star else None
    side = Side.SplitLeftOfChange if t_split <= t_star else Side.SplitRightOfChange
    return SplitGeometry(n, t_star, t_split, side, alpha1, alpha2)


@dataclass
class ChangePointEstimate:
    index: int
    slope_before: float = float("nan")
    slope_after: float = float("nan")
    magnitude: float = 0.0
    verified: bool = False
    degenerate: bool = False

    def __post_init__(self):
        if self.index < 1:
            raise BoundsError(f"change index must be >= 1, got {self.index}")
        if self.magnitude < 0:
            raise BoundsError("magnitude must be non-negative")

    def to_dict(self) -> dict:
        return {
            "index": int(self.index),
            "slope_before": _json_float(self.slope_before),
            "slope_after": _json_float(self.slope_after),
            "magnitude": _json_float(self.magnitude),
            "verified": bool(self.verified),
        }


def _json_float(x: float):
    x = float(x)
    return x if np.isfinite(x) else None


@dataclass(frozen=True)
class GroundTruth:
    change_indices: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.change_indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise DataError(f"change indices must be strictly increasing: {idx}")
        object.__setattr__(self, "change_indices", idx)

    def validate(self, n: int) -> "GroundTruth":
        for i in self.change_indices:
            if not 2 <= i <= n:
                raise BoundsError(f"change index {i} outside [2, {n}]")
        return self

    def __len__(self) -> int:
        return len(self.change_indices)

    def __iter__(self):
        return iter(self.change_indices)


# ---------------------------------------------------------------- file I/O


def read_series_csv(path: str | os.PathLike) -> TimeSeries:
    """Read a headerless numeric CSV; row 1 is ``t = 1``."""
    rows: list[list[float]] = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {width}")
            values = []
            for col, cell in enumerate(row, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col}: not a number: {cell!r}") from None
                if not np.isfinite(v):
                    raise DataError(f"{path}: row {lineno}, column {col}: non-finite value {cell!r}")
                values.append(v)
            rows.append(values)
    if len(rows) < 2:
        raise DataError(f"{path}: need at least 2 rows, found {len(rows)}")
    return TimeSeries(np.array(rows))


def write_series_csv(series: TimeSeries | np.ndarray, path: str | os.PathLike) -> None:
    data = series.data if isinstance(series, TimeSeries) else np.atleast_2d(series)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in data:
            writer.writerow([repr(float(v)) for v in row])


def read_truth(path: str | os.PathLike) -> GroundTruth:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise DataError(f"{path}: line {lineno}: not an integer: {line!r}") from None
    return GroundTruth(tuple(out))


def write_truth(truth: GroundTruth | Iterable[int], path: str | os.PathLike) -> None:
    indices = truth.change_indices if isinstance(truth, GroundTruth) else tuple(truth)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(f"{i}\n" for i in indices))


def as_matrix(x: Sequence | np.ndarray, dim: int | None = None) -> np.ndarray:
    """Coerce samples to a 2-D float array, checking the column count."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[:, None] if dim == 1 else arr[None, :]
    if dim is not None and arr.shape[1] != dim:
        raise DataError(f"dimension mismatch: expected {dim}, got {arr.shape[1]}")
    return arr
