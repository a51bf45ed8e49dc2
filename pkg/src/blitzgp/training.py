"""Optimisation loop, Adadelta, minibatch scheduling and inducing-grid construction.

Models plug into :func:`train` through four methods:
``get_params()``, ``set_params(vec)``, ``param_names()`` and
``objective(vec, x, y, scale) -> (value, gradient, info)``, where ``value`` is
the quantity to *maximise*.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, DegenerateGridError, NonFiniteGradientError
from .svgp import InducingGrid

logger = logging.getLogger(__name__)

TRACE_HEADER = ("iteration", "wall_seconds", "l3_estimate", "kl", "noise_precision")


@dataclass
class TrainConfig:
    batch_size: int = 256
    iterations: int = 1000
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-6
    eval_every: int = 50
    eval_subsample: int = 2000
    optimizer: str = "adadelta"
    patience: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        errors = []
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.iterations < 0:
            errors.append("iterations must be >= 0")
        if not 0.0 < self.rho < 1.0:
            errors.append("rho must lie in (0, 1)")
        if not self.eps > 0:
            errors.append("eps must be positive")
        if self.eval_every < 1:
            errors.append("eval_every must be >= 1")
        if self.optimizer not in ("adadelta", "lbfgs"):
            errors.append(f"unknown optimizer {self.optimizer!r}")
        if self.patience is not None and self.patience < 1:
            errors.append("patience must be >= 1 when set")
        if errors:
            raise ConfigError("; ".join(errors), errors)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Adadelta
# ---------------------------------------------------------------------------


@dataclass
class AdadeltaState:
    sq_grad: np.ndarray
    sq_delta: np.ndarray
    rho: float = 0.95
    eps: float = 1e-6

    @classmethod
    def zeros(cls, n: int, rho: float = 0.95, eps: float = 1e-6) -> "AdadeltaState":
        return cls(np.zeros(n), np.zeros(n), rho, eps)


def adadelta_step(state: AdadeltaState, params, grads, names=None, iteration=None):
    """One Adadelta update for *minimisation*; returns ``(new_state, new_params)``.

    To ascend an objective, pass its negated gradient.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or grads.shape != state.sq_grad.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.sq_grad.shape}")
    bad = ~np.isfinite(grads)
    if bad.any():
        j = int(np.argmax(bad))
        name = names[j] if names is not None else f"param[{j}]"
        raise NonFiniteGradientError(
            f"non-finite gradient for {name} at iteration {iteration}", parameter=name, iteration=iteration
        )
    rho, eps = state.rho, state.eps
    sq_grad = rho * state.sq_grad + (1.0 - rho) * grads**2
    delta = -np.sqrt(state.sq_delta + eps) / np.sqrt(sq_grad + eps) * grads
    sq_delta = rho * state.sq_delta + (1.0 - rho) * delta**2
    return AdadeltaState(sq_grad, sq_delta, rho, eps), params + delta


# ---------------------------------------------------------------------------
# batching and grids
# ---------------------------------------------------------------------------


def minibatch_schedule(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Permutation-based batches for one epoch; every index appears exactly once."""
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size must lie in [1, {n}], got {batch_size}")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def build_grid(x, sizes, padding: float = 0.0) -> InducingGrid:
    """Uniform grid per dimension over ``[min - pad*range, max + pad*range]``.

    Size-1 dimensions get the midpoint of the data range.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sizes = list(sizes)
    if len(sizes) != x.shape[1]:
        raise ValueError(f"{len(sizes)} grid sizes for {x.shape[1]}-d data")
    points = []
    for d, m in enumerate(sizes):
        if m < 1:
            raise ValueError("grid sizes must be >= 1")
        lo, hi = float(np.min(x[:, d])), float(np.max(x[:, d]))
        if m == 1:
            points.append(np.array([0.5 * (lo + hi)]))
            continue
        span = hi - lo
        if not span > 0:
            raise DegenerateGridError(f"dimension {d} has zero range but {m} grid points requested")
        points.append(np.linspace(lo - padding * span, hi + padding * span, m))
    return InducingGrid(tuple(points))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    iteration: int
    wall_seconds: float
    l3_estimate: float
    kl: float
    noise_precision: float


@dataclass
class Trace:
    rows: list = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def best_so_far(self) -> np.ndarray:
        return np.maximum.accumulate([r.l3_estimate for r in self.rows]) if self.rows else np.zeros(0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for r in self.rows:
                w.writerow([r.iteration, *(repr(float(v)) for v in (r.wall_seconds, r.l3_estimate, r.kl, r.noise_precision))])

    def __len__(self) -> int:
        return len(self.rows)


def _noise_precision(model) -> float:
    hyper = getattr(model, "hyper", None)
    return hyper.beta if hyper is not None else float("nan")


def train(model, x, y, config: TrainConfig):
    """Fit ``model`` to ``(x, y)``; returns ``(model, trace)``.

    Adadelta runs a fixed iteration budget over permutation minibatches and
    evaluates the bound every ``eval_every`` steps (on the full data, or on a
    fixed seeded subsample when ``N > eval_subsample``). The parameters of the
    best evaluation are restored at the end. ``lbfgs`` runs full-batch L-BFGS
    for up to ``iterations`` steps.
    """
    config.validate()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if config.optimizer == "lbfgs":
        return _train_lbfgs(model, x, y, config)
    return _train_adadelta(model, x, y, config)


def _eval_set(n: int, config: TrainConfig) -> np.ndarray | None:
    if n <= config.eval_subsample:
        return None
    rng = np.random.default_rng([config.seed, 0xE1A1])
    return np.sort(rng.choice(n, size=config.eval_subsample, replace=False))


def _train_adadelta(model, x, y, config: TrainConfig):
    n = x.shape[0]
    trace = Trace()
    names = model.param_names()
    params = model.get_params()
    if config.iterations == 0:
        return model, trace
    batch = min(config.batch_size, n)
    sub = _eval_set(n, config)
    ex, ey = (x, y) if sub is None else (x[sub], y[sub])
    escale = 1.0 if sub is None else n / sub.size
    start = time.perf_counter()

    def evaluate(it, p):
        value, _, info = model.objective(p, ex, ey, escale)
        trace.append(TraceRow(it, time.perf_counter() - start, float(value), float(info.get("kl", float("nan"))), _noise_precision(model)))
        return value

    best_value = evaluate(0, params)
    best_params = params.copy()
    stale = 0
    state = AdadeltaState.zeros(params.size, config.rho, config.eps)
    epoch, batches = 0, minibatch_schedule(n, batch, config.seed, 0)
    pos = 0
    for it in range(1, config.iterations + 1):
        if pos == len(batches):
            epoch += 1
            batches = minibatch_schedule(n, batch, config.seed, epoch)
            pos = 0
        idx = batches[pos]
        pos += 1
        _, grad, _ = model.objective(params, x[idx], y[idx], n / idx.size)
        state, params = adadelta_step(state, params, -grad, names, it)
        if it % config.eval_every == 0 or it == config.iterations:
            value = evaluate(it, params)
            if value > best_value:
                best_value, best_params, stale = value, params.copy(), 0
            else:
                stale += 1
                if config.patience is not None and stale >= config.patience:
                    logger.info("stopping at iteration %d after %d stale evaluations", it, stale)
                    break
    model.set_params(best_params)
    if hasattr(model, "iteration"):
        model.iteration = trace.rows[-1].iteration
    if hasattr(model, "seed"):
        model.seed = config.seed
    return model, trace


def _train_lbfgs(model, x, y, config: TrainConfig):
    trace = Trace()
    if config.iterations == 0:
        return model, trace
    start = time.perf_counter()
    names = model.param_names()

    def fun(p):
        value, grad, _ = model.objective(p, x, y, 1.0)
        if not np.all(np.isfinite(grad)):
            j = int(np.argmax(~np.isfinite(grad)))
            raise NonFiniteGradientError(f"non-finite gradient for {names[j]}", parameter=names[j])
        return -value, -grad

    def record(it, p):
        value, _, info = model.objective(p, x, y, 1.0)
        trace.append(TraceRow(it, time.perf_counter() - start, float(value), float(info.get("kl", float("nan"))), _noise_precision(model)))

    p0 = model.get_params()
    record(0, p0)
    counter = {"it": 0}

    def callback(intermediate_result):
        counter["it"] += 1
        record(counter["it"], intermediate_result.x)

    res = minimize(fun, p0, jac=True, method="L-BFGS-B", callback=callback, options={"maxiter": config.iterations})
    # line search enforces sufficient increase, so the last iterate is the best
    model.set_params(res.x)
    if hasattr(model, "iteration"):
        model.iteration = counter["it"]
    if hasattr(model, "seed"):
        model.seed = config.seed
    return model, trace
