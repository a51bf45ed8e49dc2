"""Datasets, normalisation, synthetic generators and evaluation metrics."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, GuardError, SchemaError
from .kernels import EQParams, kernel_matrix
from .kron import jitter_cholesky
from .svgp import BlitzModel, predict

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
TOY_DENSE_CAP = 6000
TOY_LENGTHSCALE = math.sqrt(20.0)
TOY_NOISE_STD = 0.2


@dataclass
class Normalization:
    """Per-column affine map ``z = (v - mean) / scale``, optionally on ``log(y)``."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    log_target: bool = False

    @classmethod
    def identity(cls, ndim: int) -> "Normalization":
        return cls(np.zeros(ndim), np.ones(ndim))

    @classmethod
    def fit(cls, x, y, log_target: bool = False) -> "Normalization":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64)
        if log_target:
            if np.any(y <= 0):
                raise DataError("log target needs strictly positive values")
            y = np.log(y)
        x_scale = np.std(x, axis=0)
        x_scale = np.where(x_scale > 0, x_scale, 1.0)
        y_scale = float(np.std(y)) if y.size > 1 and np.std(y) > 0 else 1.0
        return cls(np.mean(x, axis=0), x_scale, float(np.mean(y)), y_scale, log_target)

    def transform_x(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_scale

    def transform_y(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if self.log_target:
            y = np.log(y)
        return (y - self.y_mean) / self.y_scale

    def inverse_y(self, z) -> np.ndarray:
        y = np.asarray(z, dtype=np.float64) * self.y_scale + self.y_mean
        return np.exp(y) if self.log_target else y

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "log_target": self.log_target,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Normalization":
        try:
            return cls(
                np.asarray(doc["x_mean"], dtype=np.float64),
                np.asarray(doc["x_scale"], dtype=np.float64),
                float(doc["y_mean"]),
                float(doc["y_scale"]),
                bool(doc["log_target"]),
            )
        except KeyError as exc:
            raise SchemaError(f"normalization record is missing {exc}") from None


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    features: list = field(default_factory=list)
    target: str = "y"
    dropped: int = 0
    normalization: Normalization | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.x.shape[0] != self.y.size:
            raise DataError(f"{self.x.shape[0]} input rows but {self.y.size} targets")
        if not self.features:
            self.features = [f"x_{d}" for d in range(self.x.shape[1])]
        if len(self.features) != self.x.shape[1]:
            raise SchemaError("feature names do not match the input columns")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def ndim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], list(self.features), self.target, 0, self.normalization)

    def normalized(self, norm: Normalization) -> "Dataset":
        return Dataset(norm.transform_x(self.x), norm.transform_y(self.y), list(self.features), self.target, self.dropped, norm)


# ---------------------------------------------------------------------------
# csv
# ---------------------------------------------------------------------------


def load_csv(path, target: str, features=None) -> Dataset:
    """Read a headered CSV; rows with a missing or unparseable value are dropped and counted."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        if features is None:
            features = [h for h in header if h != target]
        features = list(features)
        missing = [c for c in [target, *features] if c not in header]
        if missing:
            raise SchemaError(f"{path} lacks columns {missing}; header is {header}")
        cols = [header.index(c) for c in features] + [header.index(target)]
        rows, dropped = [], 0
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(not v.strip() for v in rec):
                continue
            try:
                vals = [float(rec[c]) for c in cols]
            except (ValueError, IndexError):
                dropped += 1
                logger.warning("%s:%d dropped (unparseable)", path, line_no)
                continue
            if not all(math.isfinite(v) for v in vals):
                dropped += 1
                logger.warning("%s:%d dropped (non-finite)", path, line_no)
                continue
            rows.append(vals)
    if not rows:
        raise DataError(f"{path} has no usable rows ({dropped} dropped)")
    if dropped:
        logger.warning("%s: dropped %d of %d rows", path, dropped, dropped + len(rows))
    arr = np.array(rows)
    return Dataset(arr[:, :-1], arr[:, -1], features, target, dropped)


def load_features(path, features) -> np.ndarray:
    """Input matrix from the named columns of a headered CSV (no target needed)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        missing = [c for c in features if c not in header]
        if missing:
            raise SchemaError(f"{path} lacks columns {missing}; header is {header}")
        cols = [header.index(c) for c in features]
        try:
            rows = [[float(rec[c]) for c in cols] for rec in reader if rec]
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: unparseable query row ({exc})") from None
    if not rows:
        raise DataError(f"{path} has no query rows")
    return np.array(rows)


def write_csv(ds: Dataset, path) -> None:
    """Write with ``repr`` floats so a re-load is bit-exact."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*ds.features, ds.target])
        for xi, yi in zip(ds.x, ds.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random partition into sorted ``(train, test)`` index arrays."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(round(test_fraction * n))
    if n_test < 1 or n_test >= n:
        raise DataError(f"cannot split {n} rows with test fraction {test_fraction}")
    perm = np.random.default_rng([seed, 0x5917]).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def ar_lag(series, lags: int, name: str = "y") -> Dataset:
    """Autoregressive features: row ``t`` holds ``series[t-lags:t]`` and targets ``series[t]``."""
    s = np.asarray(series, dtype=np.float64).ravel()
    if lags < 1:
        raise ValueError("lags must be >= 1")
    if s.size <= lags:
        raise DataError(f"series of length {s.size} is too short for {lags} lags")
    x = np.lib.stride_tricks.sliding_window_view(s[:-1], lags).copy()
    return Dataset(x, s[lags:], [f"{name}_lag{lags - j}" for j in range(lags)], name)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def gen_toy_gp(
    seed: int,
    n: int = 5500,
    domain=(-2.0, 2.0),
    lengthscale: float = TOY_LENGTHSCALE,
    variance: float = 1.0,
    noise: float = TOY_NOISE_STD,
    dense_cap: int = TOY_DENSE_CAP,
) -> Dataset:
    """Draw from a 2-d zero-mean EQ GP prior at uniform inputs, plus Gaussian noise of std ``noise``.

    The draw is exact (dense Cholesky), so ``n`` is capped at ``dense_cap``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > dense_cap:
        raise GuardError(f"toy draw is dense; n={n} exceeds the cap of {dense_cap}")
    rng = np.random.default_rng(seed)
    lo, hi = domain
    x = rng.uniform(lo, hi, size=(n, 2))
    k = kernel_matrix(EQParams.create([lengthscale, lengthscale], variance), x, x)
    chol, _ = jitter_cholesky(k)
    f = chol @ rng.standard_normal(n)
    return Dataset(x, f + noise * rng.standard_normal(n))


def square_wave(x, amplitude: float = 1.0) -> np.ndarray:
    """Checkerboard of unit blocks: ``+amplitude`` on block ``(0, 0)``, alternating sign."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    parity = np.sum(np.floor(x).astype(np.int64), axis=1) % 2
    return amplitude * np.where(parity == 0, 1.0, -1.0)


def gen_square_wave(seed: int, n: int = 10000, blocks: int = 7, strips=None, amplitude: float = 1.0):
    """Square-wave samples at uniform points of ``[0, blocks]^2``.

    ``strips`` lists ``(dim, block_index)`` pairs to excise; the default is the
    central row and column of blocks. Returns ``(observed, excised)``.
    """
    if blocks < 1:
        raise ValueError("blocks must be >= 1")
    if strips is None:
        strips = [(0, blocks // 2), (1, blocks // 2)]
    for d, b in strips:
        if d not in (0, 1) or not 0 <= b < blocks:
            raise ValueError(f"invalid strip {(d, b)} for {blocks} blocks")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, blocks, size=(n, 2))
    y = square_wave(x, amplitude)
    cut = np.zeros(n, dtype=bool)
    for d, b in strips:
        cut |= np.floor(x[:, d]) == b
    if cut.all():
        raise DataError("strips cover the whole domain; nothing left to train on")
    return Dataset(x[~cut], y[~cut]), Dataset(x[cut], y[cut]) if cut.any() else None


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def gaussian_log_likelihood(y, mean, var) -> np.ndarray:
    """Pointwise ``log N(y | mean, var)``."""
    y, mean, var = (np.asarray(a, dtype=np.float64) for a in (y, mean, var))
    return -0.5 * (LOG_2PI + np.log(var) + (y - mean) ** 2 / var)


@dataclass
class EvalReport:
    model: str
    n_test: int
    rmse: float
    mean_log_likelihood: float
    sum_log_likelihood: float
    wall_seconds: float

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n_test": self.n_test,
            "rmse": self.rmse,
            "mean_log_likelihood": self.mean_log_likelihood,
            "sum_log_likelihood": self.sum_log_likelihood,
            "wall_seconds": self.wall_seconds,
        }


def report_from_predictions(y, mean, predictive_var, model: str, wall_seconds: float) -> EvalReport:
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("cannot evaluate on an empty test set")
    ll = gaussian_log_likelihood(y, mean, predictive_var)
    return EvalReport(
        model,
        int(y.size),
        float(np.sqrt(np.mean((np.asarray(mean) - y) ** 2))),
        float(np.mean(ll)),
        float(np.sum(ll)),
        float(wall_seconds),
    )


def predict_observed(model, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(mean, latent variance, predictive variance)`` for either model type."""
    if isinstance(model, BlitzModel):
        mean, var = predict(model, x)
    else:
        mean, var = model.predict(x)
    return mean, var, var + model.hyper.noise_variance


def evaluate(model, test: Dataset, model_id: str = "model", fit_seconds: float = 0.0) -> EvalReport:
    """RMSE and Gaussian predictive log-likelihood on ``test``, in the space ``test`` is expressed in.

    ``wall_seconds`` is ``fit_seconds`` plus the prediction time measured here.
    """
    if test is None or test.n == 0:
        raise ValueError("cannot evaluate on an empty test set")
    start = time.perf_counter()
    mean, _, pvar = predict_observed(model, test.x)
    elapsed = time.perf_counter() - start
    return report_from_predictions(test.y, mean, pvar, model_id, fit_seconds + elapsed)
