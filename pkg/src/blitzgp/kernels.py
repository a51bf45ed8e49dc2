"""Product covariance functions: exponentiated quadratic (EQ) and spectral mixture (SM).

Both kernels factor over input dimensions, ``k(x, z) = prod_d k_d(x_d - z_d)``,
which is what gives the inducing covariance its Kronecker structure.

Unconstrained parameter layout (all positive quantities stored as logs):

* EQ: ``[log variance, log lengthscale_0, ..., log lengthscale_{D-1}]``.
  The output variance multiplies the dimension-0 factor only.
* SM: ``[log weight^2 (D*Q), log mean (D*Q), log bandwidth (D*Q)]``,
  each block flattened row-major over ``(d, q)``.
* ``GPHyperparams`` appends ``log beta`` (noise precision) to the kernel vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DegenerateGridError, NumericError, SchemaError

TWO_PI_SQ = 2.0 * math.pi**2


def _finite(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite {what}")
    return a


@dataclass
class EQParams:
    log_variance: float
    log_lengthscales: np.ndarray

    def __post_init__(self):
        self.log_variance = float(self.log_variance)
        self.log_lengthscales = _finite(np.atleast_1d(self.log_lengthscales), "EQ lengthscale").copy()
        _finite(np.array(self.log_variance), "EQ variance")

    kind = "eq"

    @classmethod
    def create(cls, lengthscales, variance: float = 1.0) -> "EQParams":
        return cls(math.log(variance), np.log(np.asarray(lengthscales, dtype=np.float64)))

    @property
    def ndim(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def variance(self) -> float:
        return math.exp(self.log_variance)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def n_params(self) -> int:
        return 1 + self.ndim

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.log_variance], self.log_lengthscales])

    @classmethod
    def from_vector(cls, vec, ndim: int) -> "EQParams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[0], vec[1 : 1 + ndim])

    def param_names(self) -> list[str]:
        return ["eq.log_variance"] + [f"eq.log_lengthscale[{d}]" for d in range(self.ndim)]

    def dim_param_indices(self, d: int) -> list[int]:
        return ([0] if d == 0 else []) + [1 + d]


@dataclass
class SMParams:
    log_weights: np.ndarray  # (D, Q), log w^2
    log_means: np.ndarray  # (D, Q), log mu
    log_bandwidths: np.ndarray  # (D, Q), log sigma

    kind = "sm"

    def __post_init__(self):
        self.log_weights = _finite(np.atleast_2d(self.log_weights), "SM weight").copy()
        self.log_means = _finite(np.atleast_2d(self.log_means), "SM mean").copy()
        self.log_bandwidths = _finite(np.atleast_2d(self.log_bandwidths), "SM bandwidth").copy()
        if not (self.log_weights.shape == self.log_means.shape == self.log_bandwidths.shape):
            raise SchemaError("SM parameter arrays must share shape (D, Q)")

    @classmethod
    def create(cls, weights, means, bandwidths) -> "SMParams":
        return cls(
            np.log(np.asarray(weights, dtype=np.float64)),
            np.log(np.asarray(means, dtype=np.float64)),
            np.log(np.asarray(bandwidths, dtype=np.float64)),
        )

    @property
    def ndim(self) -> int:
        return self.log_weights.shape[0]

    @property
    def n_components(self) -> int:
        return self.log_weights.shape[1]

    @property
    def n_params(self) -> int:
        return 3 * self.log_weights.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.log_weights.ravel(), self.log_means.ravel(), self.log_bandwidths.ravel()])

    @classmethod
    def from_vector(cls, vec, ndim: int, n_components: int) -> "SMParams":
        vec = np.asarray(vec, dtype=np.float64)
        k = ndim * n_components
        shape = (ndim, n_components)
        return cls(vec[:k].reshape(shape), vec[k : 2 * k].reshape(shape), vec[2 * k : 3 * k].reshape(shape))

    def param_names(self) -> list[str]:
        names = []
        for field in ("log_weight", "log_mean", "log_bandwidth"):
            names += [f"sm.{field}[{d},{q}]" for d in range(self.ndim) for q in range(self.n_components)]
        return names

    def dim_param_indices(self, d: int) -> list[int]:
        q = self.n_components
        k = self.ndim * q
        base = d * q
        return [off + base + j for off in (0, k, 2 * k) for j in range(q)]


KernelParams = Union[EQParams, SMParams]


@dataclass
class GPHyperparams:
    """Kernel parameters plus the Gaussian noise precision ``beta`` (variance ``1/beta``)."""

    kernel: KernelParams
    log_beta: float

    def __post_init__(self):
        self.log_beta = float(self.log_beta)
        _finite(np.array(self.log_beta), "noise precision")

    @property
    def beta(self) -> float:
        return math.exp(self.log_beta)

    @property
    def noise_variance(self) -> float:
        return math.exp(-self.log_beta)

    @property
    def ndim(self) -> int:
        return self.kernel.ndim

    @property
    def n_params(self) -> int:
        return self.kernel.n_params + 1

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.kernel.to_vector(), [self.log_beta]])

    def with_vector(self, vec) -> "GPHyperparams":
        vec = np.asarray(vec, dtype=np.float64)
        if isinstance(self.kernel, EQParams):
            kern = EQParams.from_vector(vec[:-1], self.ndim)
        else:
            kern = SMParams.from_vector(vec[:-1], self.ndim, self.kernel.n_components)
        return GPHyperparams(kern, vec[-1])

    def param_names(self) -> list[str]:
        return self.kernel.param_names() + ["log_noise_precision"]

    def to_dict(self) -> dict:
        k = self.kernel
        if isinstance(k, EQParams):
            out = {
                "kernel": "eq",
                "log_variance": k.log_variance,
                "log_lengthscales": k.log_lengthscales.tolist(),
            }
        else:
            out = {
                "kernel": "sm",
                "log_weights": k.log_weights.tolist(),
                "log_means": k.log_means.tolist(),
                "log_bandwidths": k.log_bandwidths.tolist(),
            }
        out["log_noise_precision"] = self.log_beta
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "GPHyperparams":
        try:
            kind = doc["kernel"]
            if kind == "eq":
                kern = EQParams(doc["log_variance"], np.array(doc["log_lengthscales"], dtype=np.float64))
            elif kind == "sm":
                kern = SMParams(
                    np.array(doc["log_weights"], dtype=np.float64),
                    np.array(doc["log_means"], dtype=np.float64),
                    np.array(doc["log_bandwidths"], dtype=np.float64),
                )
            else:
                raise SchemaError(f"unknown kernel type {kind!r}")
            return cls(kern, doc["log_noise_precision"])
        except KeyError as exc:
            raise SchemaError(f"hyperparameter document missing key {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GPHyperparams":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# one-dimensional factors
# ---------------------------------------------------------------------------


def _lags(xs, zs) -> np.ndarray:
    xs = _finite(np.ravel(xs), "input coordinates")
    zs = _finite(np.ravel(zs), "grid coordinates")
    return xs[:, None] - zs[None, :]


def _sm_terms(params: SMParams, d: int, tau: np.ndarray):
    """Per-component pieces of the SM factor, each shaped ``tau.shape + (Q,)``."""
    w2 = np.exp(params.log_weights[d])
    mu = np.exp(params.log_means[d])
    sig2 = np.exp(2.0 * params.log_bandwidths[d])
    t = tau[..., None]
    env = np.exp(-TWO_PI_SQ * t**2 * sig2)
    phase = 2.0 * math.pi * t * mu
    return w2, mu, sig2, env, np.cos(phase), np.sin(phase)


def _factor_from_lags(params: KernelParams, d: int, tau: np.ndarray) -> np.ndarray:
    if isinstance(params, EQParams):
        out = np.exp(-0.5 * tau**2 / params.lengthscales[d] ** 2)
        if d == 0:
            out *= params.variance
        return out
    w2, _, _, env, cos, _ = _sm_terms(params, d, tau)
    return np.sum(w2 * env * cos, axis=-1)


def kernel_cross_1d(params: KernelParams, d: int, xs, zs) -> np.ndarray:
    """``N x M_d`` matrix of the dimension-``d`` factor ``k_d(x_i - z_j)``."""
    return _factor_from_lags(params, d, _lags(xs, zs))


def kernel_gram_1d(params: KernelParams, d: int, zs) -> np.ndarray:
    """Symmetric ``M_d x M_d`` Gram matrix of the dimension-``d`` factor on grid ``zs``."""
    zs = _finite(np.ravel(zs), "grid coordinates")
    if zs.size > 1 and not np.all(np.diff(zs) > 0):
        raise DegenerateGridError(f"grid coordinates for dimension {d} must be strictly increasing")
    k = kernel_cross_1d(params, d, zs, zs)
    return 0.5 * (k + k.T)


def kernel_zero_lag(params: KernelParams) -> np.ndarray:
    """Per-dimension factor values at zero lag, ``k_d(0)``."""
    return np.array([_factor_from_lags(params, d, np.zeros(1))[0] for d in range(params.ndim)])


def kernel_diag(params: KernelParams, xs) -> np.ndarray:
    """Prior variance ``k(x_i, x_i)`` at each input row (constant for these kernels)."""
    xs = _finite(np.atleast_2d(xs), "inputs")
    return np.full(xs.shape[0], float(np.prod(kernel_zero_lag(params))))


def kernel_diag_gradient(params: KernelParams) -> np.ndarray:
    """Gradient of the zero-lag value ``prod_d k_d(0)`` w.r.t. the unconstrained kernel vector."""
    k0 = kernel_zero_lag(params)
    grad = np.zeros(params.n_params)
    zero = np.zeros((1, 1))
    for d in range(params.ndim):
        others = float(np.prod(np.delete(k0, d)))
        for idx, g in zip(params.dim_param_indices(d), _factor_param_grads(params, d, zero)):
            grad[idx] += others * g[0, 0]
    return grad


def _factor_param_grads(params: KernelParams, d: int, tau: np.ndarray) -> list[np.ndarray]:
    """Derivatives of the dimension-``d`` factor, ordered as ``dim_param_indices(d)``."""
    if isinstance(params, EQParams):
        ell2 = params.lengthscales[d] ** 2
        k = _factor_from_lags(params, d, tau)
        dl = k * tau**2 / ell2
        return [k, dl] if d == 0 else [dl]
    w2, mu, sig2, env, cos, sin = _sm_terms(params, d, tau)
    t = tau[..., None]
    term = w2 * env * cos
    d_w = term
    d_mu = -w2 * env * sin * (2.0 * math.pi * t * mu)
    d_sig = term * (-2.0 * TWO_PI_SQ * t**2 * sig2)
    q = params.n_components
    return [d_w[..., j] for j in range(q)] + [d_mu[..., j] for j in range(q)] + [d_sig[..., j] for j in range(q)]


def kernel_gradients(params: KernelParams, d: int, xs, zs) -> list[tuple[int, np.ndarray]]:
    """Derivatives of ``kernel_cross_1d(params, d, xs, zs)`` w.r.t. each log parameter.

    Returns ``(index into the unconstrained kernel vector, N x M_d matrix)``
    pairs; parameters that do not touch dimension ``d`` are omitted.
    """
    tau = _lags(xs, zs)
    return list(zip(params.dim_param_indices(d), _factor_param_grads(params, d, tau)))


def kernel_lag_derivative(params: KernelParams, d: int, xs, zs) -> np.ndarray:
    """``dk_d/dtau`` evaluated at ``tau = x_i - z_j``."""
    tau = _lags(xs, zs)
    if isinstance(params, EQParams):
        return -_factor_from_lags(params, d, tau) * tau / params.lengthscales[d] ** 2
    w2, mu, sig2, env, cos, sin = _sm_terms(params, d, tau)
    t = tau[..., None]
    return np.sum(w2 * env * (-2.0 * TWO_PI_SQ * t * sig2 * cos - 2.0 * math.pi * mu * sin), axis=-1)


def kernel_matrix(params: KernelParams, x1, x2) -> np.ndarray:
    """Dense product-kernel matrix between two sets of ``D``-dimensional inputs."""
    x1 = np.atleast_2d(x1)
    x2 = np.atleast_2d(x2)
    out = np.ones((x1.shape[0], x2.shape[0]))
    for d in range(params.ndim):
        out *= kernel_cross_1d(params, d, x1[:, d], x2[:, d])
    return out


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def init_eq(x: np.ndarray, y: np.ndarray, lengthscale_factor: float = 1.0) -> EQParams:
    """Lengthscales at the per-dimension data range, variance at the mean squared target.

    The model has zero mean, so the second moment (not the variance) is the
    prior variance that explains an offset in the targets.
    """
    rng = np.ptp(x, axis=0)
    rng = np.where(rng > 0, rng, 1.0)
    second = float(np.mean(np.square(y))) if y.size else 0.0
    var = second if second > 0 else 1.0
    return EQParams.create(lengthscale_factor * rng, var)


def init_sm(x: np.ndarray, y: np.ndarray, grid, n_components: int, seed: int) -> SMParams:
    """Spectral-mixture start point, deterministic given ``seed``.

    Weights split the target variance equally across components (the
    dimension-0 factor carries the scale, other factors sum to one);
    means are uniform on ``[0, Nyquist]`` of the median grid spacing;
    bandwidths are the inverse data range.
    """
    rng = np.random.default_rng(seed)
    dims = x.shape[1]
    var = float(np.var(y)) if y.size > 1 and np.var(y) > 0 else 1.0
    weights = np.full((dims, n_components), 1.0 / n_components)
    weights[0] *= var
    means = np.empty((dims, n_components))
    bands = np.empty((dims, n_components))
    for d in range(dims):
        z = np.asarray(grid[d])
        spacing = float(np.median(np.diff(z))) if z.size > 1 else float(np.ptp(x[:, d]) or 1.0)
        nyquist = 0.5 / spacing
        # log-parameterised means must stay strictly positive
        means[d] = np.maximum(rng.uniform(0.0, nyquist, size=n_components), 1e-3 * nyquist)
        span = float(np.ptp(x[:, d])) or 1.0
        bands[d] = 1.0 / span
    return SMParams.create(weights, means, bands)


def parse_kernel_spec(spec: str) -> tuple[str, int]:
    """``'eq'`` -> ``('eq', 0)``; ``'sm:10'`` -> ``('sm', 10)``."""
    spec = spec.strip().lower()
    if spec == "eq":
        return "eq", 0
    if spec.startswith("sm:"):
        q = int(spec[3:])
        if q < 1:
            raise ValueError("SM kernel needs at least one component")
        return "sm", q
    raise ValueError(f"unknown kernel spec {spec!r}; expected 'eq' or 'sm:Q'")
