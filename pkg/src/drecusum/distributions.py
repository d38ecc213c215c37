"""Analytic Gaussian and Gaussian-mixture machinery.

Everything here serves as an oracle: exact log-densities and log-ratios,
KL divergences (closed form for Gaussian pairs, adaptive quadrature in one
dimension, Monte Carlo otherwise), the expected CUSUM slopes on either side
of a change for a given split, and the resulting accuracy bound.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import integrate

from .core import (
    BoundsError,
    DataError,
    DegenerateProblemError,
    GroundTruth,
    RandomSource,
    Side,
    SplitGeometry,
    as_matrix,
    as_random_source,
)

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_MC_SAMPLES = 200_000


class Density(Protocol):
    dim: int

    def log_pdf(self, x) -> np.ndarray | float: ...

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray: ...


class Region(enum.Enum):
    PreChange = "pre"
    PostChange = "post"


class GaussianSpec:
    """Multivariate normal with full or diagonal covariance.

    A 1-D ``covariance`` is read as the diagonal. Full covariances are
    factored once (symmetric eigen-decomposition) at construction.
    """

    def __init__(self, mean, covariance=None):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64)).copy()
        if mean.ndim != 1:
            raise DataError("mean must be a vector")
        d = mean.shape[0]
        if covariance is None:
            covariance = np.ones(d)
        cov = np.asarray(covariance, dtype=np.float64)
        if cov.ndim == 0:
            cov = np.full(d, float(cov))
        self.mean = mean
        self.dim = d
        if cov.ndim == 1:
            if cov.shape != (d,):
                raise DataError(f"diagonal covariance has length {cov.shape[0]}, expected {d}")
            if not np.all(cov > 0):
                raise DataError("diagonal covariance entries must be strictly positive")
            self.diagonal = True
            self._var = cov.copy()
            self._logdet = float(np.sum(np.log(cov)))
        else:
            if cov.shape != (d, d):
                raise DataError(f"covariance has shape {cov.shape}, expected {(d, d)}")
            if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
                raise DataError("covariance must be symmetric")
            cov = 0.5 * (cov + cov.T)
            evals, evecs = np.linalg.eigh(cov)
            if not np.all(evals > 0):
                raise DataError("covariance must be positive definite")
            self.diagonal = False
            self._cov = cov
            self._sqrt = (evecs * np.sqrt(evals)) @ evecs.T
            self._inv_sqrt = (evecs / np.sqrt(evals)) @ evecs.T
            self._logdet = float(np.sum(np.log(evals)))
        self.mean.setflags(write=False)

    @property
    def covariance(self) -> np.ndarray:
        return np.diag(self._var) if self.diagonal else self._cov.copy()

    @property
    def precision(self) -> np.ndarray:
        if self.diagonal:
            return np.diag(1.0 / self._var)
        return self._inv_sqrt @ self._inv_sqrt

    @property
    def logdet(self) -> float:
        return self._logdet

    def _whiten(self, x: np.ndarray) -> np.ndarray:
        centred = x - self.mean
        if self.diagonal:
            return centred / np.sqrt(self._var)
        return centred @ self._inv_sqrt

    def log_pdf(self, x):
        single = np.ndim(x) <= 1 and not (self.dim == 1 and np.ndim(x) == 1 and np.size(x) > 1)
        xs = as_matrix(x, self.dim)
        z = self._whiten(xs)
        out = -0.5 * (self.dim * LOG_2PI + self._logdet + np.einsum("ij,ij->i", z, z))
        return float(out[0]) if single else out

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        z = gen.standard_normal((n, self.dim))
        if self.diagonal:
            return self.mean + z * np.sqrt(self._var)
        return self.mean + z @ self._sqrt

    def __eq__(self, other):
        if not isinstance(other, GaussianSpec) or other.dim != self.dim:
            return False
        return np.array_equal(self.mean, other.mean) and np.array_equal(
            self.covariance, other.covariance
        )

    __hash__ = None

    def __repr__(self):
        kind = "diag" if self.diagonal else "full"
        return f"GaussianSpec(dim={self.dim}, mean={self.mean.tolist()}, cov={kind})"


class GaussianMixture:
    """Finite mixture of Gaussians; zero-weight components are dropped."""

    def __init__(self, weights: Sequence[float], components: Sequence[GaussianSpec]):
        w = np.asarray(weights, dtype=np.float64)
        if len(w) != len(components) or len(w) == 0:
            raise DataError("weights and components must be non-empty and of equal length")
        if np.any(w < 0) or not math.isclose(float(w.sum()), 1.0, rel_tol=0, abs_tol=1e-9):
            raise BoundsError(f"mixture weights must be non-negative and sum to 1, got {w.tolist()}")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise DataError("mixture components must share a dimension")
        keep = w > 0
        self.weights = w[keep] / w[keep].sum()
        self.components = [c for c, k in zip(components, keep) if k]
        self.dim = dims.pop()

    def log_pdf(self, x):
        logs = [c.log_pdf(x) for c in self.components]
        if len(logs) == 1:
            return logs[0]
        stacked = np.stack([np.log(w) + np.asarray(lp) for w, lp in zip(self.weights, logs)])
        out = np.logaddexp.reduce(stacked, axis=0)
        return float(out) if np.ndim(out) == 0 else out

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        counts = gen.multinomial(n, self.weights)
        labels = np.repeat(np.arange(len(counts)), counts)
        gen.shuffle(labels)
        out = np.empty((n, self.dim))
        for k, comp in enumerate(self.components):
            mask = labels == k
            out[mask] = comp.sample(int(mask.sum()), gen)
        return out

    def is_pure(self) -> bool:
        return len(self.components) == 1 or all(c == self.components[0] for c in self.components)


class MixtureSpec(GaussianMixture):
    """``lam * comp1 + (1 - lam) * comp2``."""

    def __init__(self, lam: float, comp1: GaussianSpec, comp2: GaussianSpec):
        if not 0.0 <= lam <= 1.0:
            raise BoundsError(f"mixture weight must lie in [0, 1], got {lam}")
        self.lam = float(lam)
        self.comp1 = comp1
        self.comp2 = comp2
        super().__init__([self.lam, 1.0 - self.lam], [comp1, comp2])


def gaussian_log_pdf(spec: GaussianSpec, x) -> float:
    return spec.log_pdf(x)


def mixture_log_pdf(mix: GaussianMixture, x) -> float:
    return mix.log_pdf(x)


def gaussian_kl(p: GaussianSpec, q: GaussianSpec) -> float:
    """Closed-form ``KL(p || q)`` between two Gaussians."""
    if p.dim != q.dim:
        raise DataError(f"dimension mismatch: {p.dim} vs {q.dim}")
    if p == q:
        return 0.0
    diff = q.mean - p.mean
    if p.diagonal and q.diagonal:
        trace = float(np.sum(p._var / q._var))
        maha = float(np.sum(diff * diff / q._var))
    else:
        prec_q = q.precision
        trace = float(np.trace(prec_q @ p.covariance))
        maha = float(diff @ prec_q @ diff)
    return max(0.0, 0.5 * (trace + maha - p.dim + q.logdet - p.logdet))


def _as_mixture(p) -> GaussianMixture:
    if isinstance(p, GaussianMixture):
        return p
    return GaussianMixture([1.0], [p])


def _collapse(p):
    """Return the single Gaussian behind ``p`` if it is one, else ``None``."""
    if isinstance(p, GaussianSpec):
        return p
    if isinstance(p, GaussianMixture) and p.is_pure():
        return p.components[0]
    return None


def kl_monte_carlo(p: Density, q: Density, n_samples: int = DEFAULT_MC_SAMPLES,
                   rng: RandomSource | int | None = None, return_stderr: bool = False):
    """Monte-Carlo ``KL(p || q)`` from ``n_samples`` draws of ``p``."""
    if p.dim != q.dim:
        raise DataError(f"dimension mismatch: {p.dim} vs {q.dim}")
    if n_samples < 1:
        raise BoundsError("n_samples must be >= 1")
    gen = as_random_source(rng).generator()
    x = p.sample(int(n_samples), gen)
    terms = np.asarray(p.log_pdf(x)) - np.asarray(q.log_pdf(x))
    value = float(terms.mean())
    if not return_stderr:
        return value
    stderr = float(terms.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else float("inf")
    return value, stderr


def kl_quadrature_1d(p: Density, q: Density) -> float:
    """``KL(p || q)`` in one dimension by adaptive quadrature over mean +/- 12 sd of ``p``.

    Round-off can leave a result a few ulps below zero for near-identical
    laws; it is clamped to zero because the divergence cannot be negative.
    """
    if p.dim != 1 or q.dim != 1:
        raise DataError("quadrature KL is only available in one dimension")
    comps = _as_mixture(p).components
    lo = min(float(c.mean[0]) - 12.0 * math.sqrt(float(c.covariance[0, 0])) for c in comps)
    hi = max(float(c.mean[0]) + 12.0 * math.sqrt(float(c.covariance[0, 0])) for c in comps)
    centres = sorted({float(c.mean[0]) for c in comps} | {float(c.mean[0]) for c in _as_mixture(q).components})
    points = [c for c in centres if lo < c < hi]

    def integrand(x):
        lp = float(p.log_pdf(np.array([[x]]))[0])
        lq = float(q.log_pdf(np.array([[x]]))[0])
        return math.exp(lp) * (lp - lq)

    value, _ = integrate.quad(integrand, lo, hi, points=points or None, limit=400,
                              epsabs=1e-12, epsrel=1e-10)
    return max(0.0, value)


def _kl_with_error(p, q, estimator: str, n_samples: int, rng: RandomSource) -> tuple[float, float]:
    if p.dim != q.dim:
        raise DataError(f"dimension mismatch: {p.dim} vs {q.dim}")
    gp, gq = _collapse(p), _collapse(q)
    if gp is not None and gq is not None:
        return gaussian_kl(gp, gq), 0.0
    if estimator == "auto":
        estimator = "quadrature-1d" if p.dim == 1 else "monte-carlo"
    if estimator == "quadrature-1d":
        return kl_quadrature_1d(p, q), 0.0
    if estimator == "monte-carlo":
        return kl_monte_carlo(p, q, n_samples, rng, return_stderr=True)
    raise ValueError(f"unknown KL estimator {estimator!r}")


def kl_divergence(p: Density, q: Density, estimator: str = "auto",
                  n_samples: int = DEFAULT_MC_SAMPLES, rng: RandomSource | int | None = None) -> float:
    """``KL(p || q)``: exact for Gaussian pairs, else quadrature (d=1) or Monte Carlo."""
    return _kl_with_error(p, q, estimator, n_samples, as_random_source(rng))[0]


def _f_with_error(i, gamma, lam, p1, p2, estimator, n_samples, rng):
    if i not in (1, 2):
        raise BoundsError(f"component index must be 1 or 2, got {i}")
    # gamma = 1 arises when the split coincides with the change.
    if not 0.0 < gamma <= 1.0:
        raise BoundsError(f"gamma must lie in (0, 1], got {gamma}")
    if not 0.0 <= lam <= 1.0:
        raise BoundsError(f"lambda must lie in [0, 1], got {lam}")
    if p1.dim != p2.dim:
        raise DataError(f"dimension mismatch: {p1.dim} vs {p2.dim}")
    if p1 == p2:
        return 0.0, 0.0
    pure = p1 if i == 1 else p2
    mix = MixtureSpec(lam, p1, p2)
    kl_a, se_a = _kl_with_error(mix, pure, estimator, n_samples, rng.child(1))
    w_b = (1.0 - gamma) / gamma
    kl_b, se_b = (0.0, 0.0) if w_b == 0 else _kl_with_error(pure, mix, estimator, n_samples, rng.child(2))
    value = kl_a / gamma + w_b * kl_b
    return value, math.hypot(se_a / gamma, w_b * se_b)


def f_weighted_kl(i: int, gamma: float, lam: float, p1: GaussianSpec, p2: GaussianSpec,
                  estimator: str = "auto", n_samples: int = DEFAULT_MC_SAMPLES,
                  rng: RandomSource | int | None = None) -> float:
    """``KL(P(lam) || P_i) / gamma + (1 - gamma) / gamma * KL(P_i || P(lam))``."""
    return _f_with_error(i, gamma, lam, p1, p2, estimator, n_samples, as_random_source(rng))[0]


def oracle_log_ratio(left: Density, right: Density, x):
    """Exact ``log p_left(x) - log p_right(x)``; vectorised over rows of ``x``."""
    if left.dim != right.dim:
        raise DataError(f"dimension mismatch: {left.dim} vs {right.dim}")
    return left.log_pdf(x) - right.log_pdf(x)


def expected_log_ratio(geom: SplitGeometry, p1: GaussianSpec, p2: GaussianSpec, region: Region,
                       estimator: str = "auto", n_samples: int = DEFAULT_MC_SAMPLES,
                       rng: RandomSource | int | None = None, return_stderr: bool = False):
    """Expected per-sample slope of the oracle CUSUM in ``region``.

    Split left of the change: the left half is pure pre-change, the right a
    mixture with post-change weight ``alpha1``. Split right of it: the left
    half mixes in pre-change weight ``alpha2`` and the right is pure
    post-change. The index ``t = t_star`` counts as post-change.
    """
    rng = as_random_source(rng)
    region = Region(region)
    if p1 == p2:
        return (0.0, 0.0) if return_stderr else 0.0
    if geom.side is Side.SplitLeftOfChange:
        a1 = geom.alpha1
        if a1 <= 0.0:
            raise DegenerateProblemError("alpha1 is 0: the right half contains no post-change samples")
        if region is Region.PreChange:
            value, se = _kl_with_error(p1, MixtureSpec(1.0 - a1, p1, p2), estimator, n_samples, rng)
        else:
            value, se = _f_with_error(1, a1, 1.0 - a1, p1, p2, estimator, n_samples, rng)
            value = -value
    else:
        a2 = geom.alpha2
        if a2 <= 0.0:
            raise DegenerateProblemError("alpha2 is 0: the left half contains no pre-change samples")
        if region is Region.PreChange:
            value, se = _f_with_error(2, a2, a2, p1, p2, estimator, n_samples, rng)
        else:
            value, se = _kl_with_error(p2, MixtureSpec(a2, p1, p2), estimator, n_samples, rng)
            value = -value
    return (value, se) if return_stderr else value


def split_mixtures(geom: SplitGeometry, p1: GaussianSpec, p2: GaussianSpec) -> tuple[GaussianMixture, GaussianMixture]:
    """Left and right laws implied by ``geom`` with the mixing weights above."""
    if geom.side is Side.SplitLeftOfChange:
        return GaussianMixture([1.0], [p1]), MixtureSpec(1.0 - geom.alpha1, p1, p2)
    return MixtureSpec(geom.alpha2, p1, p2), GaussianMixture([1.0], [p2])


def min_slope_c(geom: SplitGeometry, p1: GaussianSpec, p2: GaussianSpec, estimator: str = "auto",
                n_samples: int = DEFAULT_MC_SAMPLES, rng: RandomSource | int | None = None) -> float:
    """Smallest absolute expected slope on either side of the change."""
    if p1 == p2:
        raise DegenerateProblemError("p1 and p2 are identical: no detectable change (C = 0)")
    rng = as_random_source(rng)
    pre = expected_log_ratio(geom, p1, p2, Region.PreChange, estimator, n_samples, rng.child(0))
    post = expected_log_ratio(geom, p1, p2, Region.PostChange, estimator, n_samples, rng.child(1))
    c = min(abs(pre), abs(post))
    if c <= 0.0:
        raise DegenerateProblemError("minimum expected slope is 0")
    return c


@dataclass(frozen=True)
class AccuracyBound:
    a_bound: float
    c_min: float
    beta: float
    alpha: float


def theorem_alpha(a_bound: float, c_min: float, beta: float) -> AccuracyBound:
    """Radius ``alpha`` such that ``P[|T_hat - T*| < alpha] >= 1 - beta``."""
    if not a_bound > 0:
        raise BoundsError(f"log-ratio bound A must be positive, got {a_bound}")
    if not c_min > 0:
        raise BoundsError(f"minimum slope C must be positive, got {c_min}")
    if not 0.0 < beta < 1.0:
        raise BoundsError(f"beta must lie in (0, 1), got {beta}")
    alpha = (2.0 * a_bound**2 / c_min**2) * math.log(32.0 / (3.0 * beta))
    return AccuracyBound(float(a_bound), float(c_min), float(beta), alpha)


# ------------------------------------------------------ piecewise-Gaussian series


def block_law(segment_specs: Sequence[GaussianSpec], truth: GroundTruth, start: int, stop: int) -> GaussianMixture:
    """Law of a uniformly chosen row among rows ``start..stop`` (1-based, inclusive)."""
    bounds = [1, *truth.change_indices, None]
    if len(segment_specs) != len(truth) + 1:
        raise DataError("need one GaussianSpec per segment")
    weights = []
    for k in range(len(segment_specs)):
        seg_lo = bounds[k]
        seg_hi = (bounds[k + 1] - 1) if bounds[k + 1] is not None else stop
        overlap = max(0, min(seg_hi, stop) - max(seg_lo, start) + 1)
        weights.append(overlap)
    total = sum(weights)
    if total == 0:
        raise BoundsError(f"empty block {start}..{stop}")
    return GaussianMixture([w / total for w in weights], list(segment_specs))


def split_laws(segment_specs: Sequence[GaussianSpec], truth: GroundTruth, n: int,
               t_split: int) -> tuple[GaussianMixture, GaussianMixture]:
    """Exact left/right laws of a piecewise-Gaussian series split at ``t_split``."""
    return (block_law(segment_specs, truth, 1, t_split - 1),
            block_law(segment_specs, truth, t_split, n))
