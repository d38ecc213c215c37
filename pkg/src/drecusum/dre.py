"""Density-ratio estimators trained with empirical KLIEP or LSIF objectives.

Both model families output ``w(x) = softplus(z(x))`` clamped to
``[eps, 1/eps]``, where ``z`` is either a weighted sum of Gaussian bumps
around fixed centres or a sigmoid feed-forward network. Parameters live in a
single flat vector so optimizers and gradient checks see one array.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .core import DataError, RandomSource, TrainingError, as_matrix, as_random_source

DEFAULT_CLAMP_EPS = 1e-6
_SOFTPLUS_ONE = math.log(math.e - 1.0)  # softplus(x) == 1


class Objective(str, enum.Enum):
    KLIEP = "kliep"
    LSIF = "lsif"


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


# -------------------------------------------------------------------- models


class DensityRatioModel:
    """Base class: ``predict(x) = clip(softplus(raw(x)), eps, 1/eps)``."""

    kind = "base"

    def __init__(self, input_dim: int, n_params: int, clamp_eps: float = DEFAULT_CLAMP_EPS,
                 dtype=np.float64):
        if not 0.0 < clamp_eps < 1.0:
            raise ValueError(f"clamp_eps must lie in (0, 1), got {clamp_eps}")
        self.input_dim = int(input_dim)
        self.clamp_eps = float(clamp_eps)
        self.dtype = np.dtype(dtype)
        self.parameters = np.zeros(n_params, dtype=self.dtype)

    # subclasses implement _forward (returns raw z and a cache) and _backward
    def _forward(self, x: np.ndarray):
        raise NotImplementedError

    def _backward(self, cache, grad_z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _prepare(self, x) -> np.ndarray:
        return as_matrix(x, self.input_dim).astype(self.dtype, copy=False)

    def raw(self, x) -> np.ndarray:
        return self._forward(self._prepare(x))[0]

    def _clamp(self, z):
        return np.clip(_softplus(z), self.clamp_eps, 1.0 / self.clamp_eps)

    def predict(self, x) -> np.ndarray:
        """Ratio estimates for each row of ``x`` (always strictly positive)."""
        return self._clamp(self.raw(x)).astype(np.float64)

    def log_ratio(self, x) -> np.ndarray:
        return np.log(self.predict(x))

    def value_and_grad(self, x: np.ndarray, dobj_dw) -> tuple[np.ndarray, np.ndarray]:
        """Ratios on ``x`` and the parameter gradient of ``sum(g(w_i))``.

        ``dobj_dw`` maps the ratio vector to the per-sample derivatives
        ``g'(w_i)``. Samples whose ratio sits on a clamp contribute nothing.
        """
        z, cache = self._forward(self._prepare(x))
        sp = _softplus(z)
        w = np.clip(sp, self.clamp_eps, 1.0 / self.clamp_eps)
        active = (sp > self.clamp_eps) & (sp < 1.0 / self.clamp_eps)
        grad_z = np.asarray(dobj_dw(w), dtype=self.dtype) * _sigmoid(z) * active
        return w, self._backward(cache, grad_z)

    def to_dict(self) -> dict:
        raise NotImplementedError


def predict_ratio(model: DensityRatioModel, x) -> float | np.ndarray:
    """Clamped ratio estimate; a scalar for a single d-vector."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 0 or (arr.ndim == 1 and (model.input_dim > 1 or arr.size == 1))
    out = model.predict(arr)
    return float(out[0]) if single else out


class KernelRatioModel(DensityRatioModel):
    """``z(x) = sum_k theta_k exp(-|x - c_k|^2 / (2 sigma^2)) + theta_0``."""

    kind = "KernelBasis"

    def __init__(self, centers: np.ndarray, bandwidth: float, clamp_eps: float = DEFAULT_CLAMP_EPS):
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        super().__init__(centers.shape[1], centers.shape[0] + 1, clamp_eps)
        self.centers = centers
        self.bandwidth = float(bandwidth)

    def design(self, x: np.ndarray) -> np.ndarray:
        sq = cdist(x, self.centers, "sqeuclidean")
        return np.exp(-sq / (2.0 * self.bandwidth**2))

    def _forward(self, x):
        k = self.design(x)
        return k @ self.parameters[:-1] + self.parameters[-1], k

    def _backward(self, k, grad_z):
        return np.concatenate([k.T @ grad_z, [grad_z.sum()]])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "clamp_eps": self.clamp_eps,
            "bandwidth": self.bandwidth,
            "centers": self.centers.tolist(),
            "parameters": self.parameters.astype(np.float64).tolist(),
        }


class MlpRatioModel(DensityRatioModel):
    """Feed-forward network: sigmoid hidden layers, softplus output.

    Inputs are standardised with a fixed shift/scale (set from the training
    data) before the first layer; those are not trainable.
    """

    kind = "FeedForward"

    def __init__(self, input_dim: int, hidden_widths: Sequence[int] = (256, 512, 128),
                 clamp_eps: float = DEFAULT_CLAMP_EPS, dtype=np.float32):
        if len(hidden_widths) < 1:
            raise ValueError("need at least one hidden layer")
        self.widths = [int(input_dim), *(int(w) for w in hidden_widths), 1]
        self.shapes = list(zip(self.widths[:-1], self.widths[1:]))
        n_params = sum(a * b + b for a, b in self.shapes)
        super().__init__(input_dim, n_params, clamp_eps, dtype)
        self.shift = np.zeros(input_dim)
        self.scale = np.ones(input_dim)
        self._bind_views()

    def _bind_views(self):
        self.weights, self.biases = [], []
        offset = 0
        for a, b in self.shapes:
            self.weights.append(self.parameters[offset : offset + a * b].reshape(a, b))
            offset += a * b
            self.biases.append(self.parameters[offset : offset + b])
            offset += b

    def initialize(self, gen: np.random.Generator) -> "MlpRatioModel":
        for (a, b), weight, bias in zip(self.shapes, self.weights, self.biases):
            limit = math.sqrt(6.0 / (a + b))
            weight[...] = gen.uniform(-limit, limit, size=(a, b))
            bias[...] = 0.0
        self.biases[-1][...] = _SOFTPLUS_ONE
        return self

    def _prepare(self, x):
        x = as_matrix(x, self.input_dim)
        return ((x - self.shift) / self.scale).astype(self.dtype, copy=False)

    def _forward(self, x):
        acts = [x]
        for weight, bias in zip(self.weights[:-1], self.biases[:-1]):
            acts.append(_sigmoid(acts[-1] @ weight + bias))
        z = acts[-1] @ self.weights[-1] + self.biases[-1]
        return z[:, 0], acts

    def _backward(self, acts, grad_z):
        flat = np.empty_like(self.parameters)
        views = []
        offset = 0
        for a, b in self.shapes:
            views.append((flat[offset : offset + a * b].reshape(a, b), flat[offset + a * b : offset + a * b + b]))
            offset += a * b + b
        delta = grad_z[:, None]
        for k in range(len(self.weights) - 1, -1, -1):
            gw, gb = views[k]
            np.matmul(acts[k].T, delta, out=gw)
            delta.sum(axis=0, out=gb)
            if k > 0:
                h = acts[k]
                delta = (delta @ self.weights[k].T) * h * (1.0 - h)
        return flat

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "clamp_eps": self.clamp_eps,
            "hidden_widths": self.widths[1:-1],
            "dtype": self.dtype.name,
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "parameters": self.parameters.astype(np.float64).tolist(),
        }


# ---------------------------------------------------------------- objectives


def kliep_objective(model: DensityRatioModel, left_batch, right_batch, lagrange: float = 1.0) -> float:
    """Mean log-ratio on the left batch minus the normalisation penalty (maximise)."""
    wl = model.predict(left_batch)
    wr = model.predict(right_batch)
    return float(np.mean(np.log(wl)) - lagrange * (np.mean(wr) - 1.0))


def lsif_objective(model: DensityRatioModel, left_batch, right_batch, swap: bool = False) -> float:
    """Mean squared ratio on the left batch minus twice the right mean (minimise).

    ``swap=True`` squares on the right batch instead (classic LSIF, where the
    squared term is taken under the denominator law).
    """
    if swap:
        left_batch, right_batch = right_batch, left_batch
    wl = model.predict(left_batch)
    wr = model.predict(right_batch)
    return float(np.mean(wl**2) - 2.0 * np.mean(wr))


def objective_and_gradient(model: DensityRatioModel, objective: Objective, left_batch, right_batch,
                           lagrange: float = 1.0, swap: bool = False) -> tuple[float, np.ndarray]:
    """Objective value and its analytic parameter gradient."""
    objective = Objective(objective)
    if objective is Objective.LSIF and swap:
        left_batch, right_batch = right_batch, left_batch
    n1, n2 = len(left_batch), len(right_batch)
    x = np.concatenate([as_matrix(left_batch, model.input_dim), as_matrix(right_batch, model.input_dim)])

    if objective is Objective.KLIEP:
        def dobj(w):
            return np.concatenate([1.0 / (n1 * w[:n1]), np.full(n2, -lagrange / n2)])
    else:
        def dobj(w):
            return np.concatenate([2.0 * w[:n1] / n1, np.full(n2, -2.0 / n2)])

    w, grad = model.value_and_grad(x, dobj)
    wl, wr = w[:n1].astype(np.float64), w[n1:].astype(np.float64)
    if objective is Objective.KLIEP:
        value = np.mean(np.log(wl)) - lagrange * (np.mean(wr) - 1.0)
    else:
        value = np.mean(wl**2) - 2.0 * np.mean(wr)
    return float(value), grad


# ------------------------------------------------------------------ training


@dataclass
class KernelConfig:
    n_centers: int = 100
    bandwidth: float | str = "median"
    objective: Objective = Objective.KLIEP
    learning_rate: float = 1e-2
    iterations: int = 500
    batch_left: int = 64
    batch_right: int = 64
    lagrange: float = 1.0
    optimizer: str = "adam"
    clamp_eps: float = DEFAULT_CLAMP_EPS
    lsif_swap: bool = False
    holdout: float = 0.1
    full_batch: bool = False

    kind = "kernel"


@dataclass
class MlpConfig:
    hidden_widths: tuple[int, ...] = (256, 512, 128)
    objective: Objective = Objective.KLIEP
    learning_rate: float = 1e-3
    iterations: int = 500
    batch_left: int = 64
    batch_right: int = 64
    lagrange: float = 1.0
    optimizer: str = "adam"
    clamp_eps: float = DEFAULT_CLAMP_EPS
    lsif_swap: bool = False
    holdout: float = 0.1
    dtype: str = "float32"
    standardize: bool = True
    full_batch: bool = False

    kind = "mlp"


def config_to_dict(config: KernelConfig | MlpConfig) -> dict:
    out = asdict(config)
    out["objective"] = Objective(config.objective).value
    out["model"] = config.kind
    if isinstance(config, MlpConfig):
        out["hidden_widths"] = list(config.hidden_widths)
    return out


def config_from_dict(data: dict) -> KernelConfig | MlpConfig:
    data = dict(data)
    kind = data.pop("model", "mlp")
    cls = {"kernel": KernelConfig, "mlp": MlpConfig}.get(kind)
    if cls is None:
        raise DataError(f"unknown model kind {kind!r}")
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise DataError(f"unknown {kind} config keys: {sorted(unknown)}")
    if "objective" in data:
        data["objective"] = Objective(str(data["objective"]).lower())
    if "hidden_widths" in data:
        data["hidden_widths"] = tuple(data["hidden_widths"])
    return cls(**data)


@dataclass
class TrainReport:
    final_objective: float
    iterations_run: int
    normalization_residual: float
    objective_trace: list[float] = field(default_factory=list)
    holdout_left: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    holdout_right: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)


class _Adam:
    def __init__(self, size, dtype, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self._buf = np.empty(size, dtype=dtype)
        self.t = 0

    def step(self, grad):
        # bias corrections folded into the step size and epsilon
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        np.multiply(grad, grad, out=self._buf)
        self._buf *= 1 - self.beta2
        self.v += self._buf
        root_bc2 = math.sqrt(1 - self.beta2**self.t)
        step_size = self.lr * root_bc2 / (1 - self.beta1**self.t)
        np.sqrt(self.v, out=self._buf)
        self._buf += self.eps * root_bc2
        np.divide(self.m, self._buf, out=self._buf)
        self._buf *= step_size
        return self._buf


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, grad):
        return self.lr * grad


def median_bandwidth(samples, rng: RandomSource | int | None = None, max_points: int = 500) -> float:
    """Median pairwise Euclidean distance over a subsample of at most ``max_points``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise DataError("median bandwidth needs at least two samples")
    if len(x) > max_points:
        idx = as_random_source(rng).generator().choice(len(x), size=max_points, replace=False)
        x = x[np.sort(idx)]
    med = float(np.median(pdist(x)))
    if med <= 0.0:
        raise DataError("median pairwise distance is zero (samples are identical)")
    return med


def _split_holdout(x: np.ndarray, frac: float, gen: np.random.Generator):
    """(train rows, held-out rows, held-out positions in ``x``)."""
    n_hold = int(round(frac * len(x)))
    if n_hold == 0 or len(x) - n_hold < 2:
        return x, x[:0], np.zeros(0, dtype=np.int64)
    perm = gen.permutation(len(x))
    hold = np.sort(perm[:n_hold])
    return x[np.sort(perm[n_hold:])], x[hold], hold


def build_model(config: KernelConfig | MlpConfig, train_left: np.ndarray, train_right: np.ndarray,
                gen: np.random.Generator) -> DensityRatioModel:
    d = train_left.shape[1]
    if isinstance(config, KernelConfig):
        m = min(config.n_centers, len(train_left))
        centers = train_left[np.sort(gen.choice(len(train_left), size=m, replace=False))]
        if config.bandwidth == "median":
            pooled = np.vstack([train_left, train_right])
            bandwidth = median_bandwidth(pooled, RandomSource(int(gen.integers(2**63))))
        else:
            bandwidth = float(config.bandwidth)
        return KernelRatioModel(centers, bandwidth, config.clamp_eps)
    model = MlpRatioModel(d, config.hidden_widths, config.clamp_eps, np.dtype(config.dtype))
    if config.standardize:
        pooled = np.vstack([train_left, train_right])
        model.shift = pooled.mean(axis=0)
        scale = pooled.std(axis=0)
        model.scale = np.where(scale > 0, scale, 1.0)
    return model.initialize(gen)


def train(config: KernelConfig | MlpConfig, left, right, rng: RandomSource | int | None = None
          ) -> tuple[DensityRatioModel, TrainReport]:
    """Fit ``w ~ p_left / p_right`` by minibatch steps on the configured objective.

    One iteration is one minibatch step (``full_batch`` steps on every
    training row instead). KLIEP ascends its objective and LSIF descends;
    10% of each side is held back for the report diagnostics.
    """
    left = np.atleast_2d(np.asarray(left, dtype=np.float64))
    right = np.atleast_2d(np.asarray(right, dtype=np.float64))
    if left.shape[1] != right.shape[1]:
        raise DataError(f"dimension mismatch: {left.shape[1]} vs {right.shape[1]}")
    if len(left) < 2 or len(right) < 2:
        raise DataError(f"need at least two samples per side, got {len(left)} and {len(right)}")
    objective = Objective(config.objective)
    gen = as_random_source(rng).generator()
    train_left, hold_left, hold_left_idx = _split_holdout(left, config.holdout, gen)
    train_right, hold_right, hold_right_idx = _split_holdout(right, config.holdout, gen)
    model = build_model(config, train_left, train_right, gen)

    if config.optimizer == "adam":
        opt = _Adam(model.parameters.size, model.dtype, config.learning_rate)
    elif config.optimizer == "sgd":
        opt = _Sgd(config.learning_rate)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    sign = 1.0 if objective is Objective.KLIEP else -1.0
    b1 = min(config.batch_left, len(train_left))
    b2 = min(config.batch_right, len(train_right))
    trace = []
    for it in range(config.iterations):
        if config.full_batch:
            xl, xr = train_left, train_right
        else:
            xl = train_left[gen.integers(0, len(train_left), size=b1)]
            xr = train_right[gen.integers(0, len(train_right), size=b2)]
        value, grad = objective_and_gradient(model, objective, xl, xr, config.lagrange, config.lsif_swap)
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            raise TrainingError(
                f"non-finite objective or gradient at iteration {it}; "
                f"learning rate {config.learning_rate} is probably too high"
            )
        trace.append(value)
        step = opt.step(grad)
        if sign > 0:
            model.parameters += step
        else:
            model.parameters -= step

    eval_right = hold_right if len(hold_right) else train_right
    if objective is Objective.KLIEP:
        final = kliep_objective(model, train_left, train_right, config.lagrange)
    else:
        final = lsif_objective(model, train_left, train_right, config.lsif_swap)
    if not math.isfinite(final):
        raise TrainingError("non-finite objective after training")
    residual = abs(float(np.mean(model.predict(eval_right))) - 1.0)
    return model, TrainReport(final, len(trace), residual, trace, hold_left_idx, hold_right_idx)


# ---------------------------------------------------------------- persistence


def model_from_dict(data: dict) -> DensityRatioModel:
    kind = data.get("kind")
    if kind == KernelRatioModel.kind:
        model = KernelRatioModel(np.array(data["centers"]), data["bandwidth"], data["clamp_eps"])
    elif kind == MlpRatioModel.kind:
        model = MlpRatioModel(data["input_dim"], data["hidden_widths"], data["clamp_eps"],
                              np.dtype(data.get("dtype", "float64")))
        model.shift = np.array(data["shift"], dtype=np.float64)
        model.scale = np.array(data["scale"], dtype=np.float64)
    else:
        raise DataError(f"unknown model kind {kind!r}")
    params = np.array(data["parameters"], dtype=np.float64)
    if params.shape != model.parameters.shape:
        raise DataError(f"parameter vector has length {params.size}, expected {model.parameters.size}")
    model.parameters[...] = params
    return model


def save_model(model: DensityRatioModel, path: str | os.PathLike, config=None) -> None:
    payload = model.to_dict()
    if config is not None:
        payload["config"] = config_to_dict(config)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_model(path: str | os.PathLike) -> DensityRatioModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
