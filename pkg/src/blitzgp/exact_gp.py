"""Dense exact GP regression: the baseline model and the reference for approximate inference."""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import DataError, DimensionError, GuardError
from .kernels import (
    GPHyperparams,
    kernel_cross_1d,
    kernel_diag,
    kernel_gradients,
    kernel_matrix,
)
from .kron import jitter_cholesky

DEFAULT_MAX_N = 5000
LOG_2PI = math.log(2.0 * math.pi)


class ExactGP:
    """Zero-mean GP with Gaussian noise of variance ``1 / beta``.

    The Cholesky of ``K + I / beta`` is cached per hyperparameter setting;
    refitting mutates the cache, so training is single-writer, while
    ``predict`` on a fixed model only reads.
    """

    def __init__(self, x, y, hyper: GPHyperparams, max_n: int = DEFAULT_MAX_N):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).ravel()
        if x.shape[0] != y.shape[0]:
            raise DimensionError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
        if x.shape[1] != hyper.ndim:
            raise DimensionError(f"inputs have {x.shape[1]} columns, kernel has {hyper.ndim} dimensions")
        if x.shape[0] > max_n:
            raise GuardError(f"exact GP capped at N={max_n} (got {x.shape[0]}); raise max_n to override")
        self.x = x
        self.y = y
        self.max_n = max_n
        self._hyper = hyper
        self._cache = None

    @property
    def hyper(self) -> GPHyperparams:
        return self._hyper

    @hyper.setter
    def hyper(self, value: GPHyperparams):
        self._hyper = value
        self._cache = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def _factor(self):
        if self._cache is None:
            k = kernel_matrix(self.hyper.kernel, self.x, self.x)
            k[np.diag_indices_from(k)] += self.hyper.noise_variance
            chol, _ = jitter_cholesky(k)
            alpha = cho_solve((chol, True), self.y, check_finite=False)
            self._cache = (chol, alpha)
        return self._cache

    def log_marginal_likelihood(self) -> float:
        if self.n == 0:
            return 0.0
        chol, alpha = self._factor()
        return float(
            -0.5 * self.y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * self.n * LOG_2PI
        )

    def log_marginal_likelihood_and_grad(self) -> tuple[float, np.ndarray]:
        """Value and gradient w.r.t. ``hyper.to_vector()``."""
        hyper = self.hyper
        kern = hyper.kernel
        value = self.log_marginal_likelihood()
        grad = np.zeros(hyper.n_params)
        if self.n == 0:
            return value, grad
        chol, alpha = self._factor()
        kinv = cho_solve((chol, True), np.eye(self.n), check_finite=False)
        # d lml / dK = 0.5 (alpha alpha^T - K^{-1})
        w = 0.5 * (np.outer(alpha, alpha) - kinv)
        factors = [kernel_cross_1d(kern, d, self.x[:, d], self.x[:, d]) for d in range(hyper.ndim)]
        for d in range(hyper.ndim):
            others = np.ones((self.n, self.n))
            for e, f in enumerate(factors):
                if e != d:
                    others *= f
            for idx, dk in kernel_gradients(kern, d, self.x[:, d], self.x[:, d]):
                grad[idx] += np.sum(w * dk * others)
        # noise variance exp(-log beta)
        grad[-1] = -hyper.noise_variance * np.trace(w)
        return value, grad

    def predict(self, xs) -> tuple[np.ndarray, np.ndarray]:
        """Latent predictive mean and variance (add ``1/beta`` for observations)."""
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        prior = kernel_diag(self.hyper.kernel, xs)
        if self.n == 0:
            return np.zeros(xs.shape[0]), prior
        chol, alpha = self._factor()
        ks = kernel_matrix(self.hyper.kernel, xs, self.x)
        mean = ks @ alpha
        v = solve_triangular(chol, ks.T, lower=True, check_finite=False)
        var = prior - np.sum(v * v, axis=0)
        return mean, np.maximum(var, 0.0)

    # trainer protocol -------------------------------------------------

    def get_params(self) -> np.ndarray:
        return self.hyper.to_vector()

    def set_params(self, vec) -> None:
        self.hyper = self.hyper.with_vector(vec)

    def param_names(self) -> list[str]:
        return self.hyper.param_names()

    def objective(self, vec, x=None, y=None, scale: float = 1.0):
        """Log marginal likelihood and gradient; full batch only, so ``x``/``y`` must be the training set."""
        if x is not None and np.shape(x)[0] != self.n:
            raise DataError("exact GP objective is full-batch only")
        self.set_params(vec)
        value, grad = self.log_marginal_likelihood_and_grad()
        return value, grad, {"kl": 0.0}

    def to_dict(self) -> dict:
        return {
            "schema": "blitzgp.exact/1",
            "hyper": self.hyper.to_dict(),
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "max_n": self.max_n,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExactGP":
        return cls(np.array(doc["x"]), np.array(doc["y"]), GPHyperparams.from_dict(doc["hyper"]), doc.get("max_n", DEFAULT_MAX_N))

