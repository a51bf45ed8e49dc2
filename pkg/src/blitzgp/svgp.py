"""Kronecker-structured stochastic variational GP on a grid of inducing points.

The inducing covariance and the variational covariance both factor over
input dimensions, ``K_mm = kron_d K_d`` and ``S = kron_d L_d L_d^T``, and the
cross-covariance ``K_nm`` is a Khatri-Rao matrix. The bound is

    L3 = sum_i [ log N(y_i | a_i^T m, 1/beta) - beta/2 ktilde_ii - beta/2 a_i^T S a_i ]
         - KL(N(m, S) || N(0, K_mm)),

with ``a_i = K_mm^{-1} k_i`` (itself a Khatri-Rao row) and
``ktilde_ii = k(x_i, x_i) - k_i^T K_mm^{-1} k_i``. Everything below works on
per-dimension factors; the ``M x M`` matrices appear only in the guarded
dense helpers used for testing and small studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import DegenerateGridError, DimensionError, GuardError, SchemaError
from .kernels import (
    GPHyperparams,
    kernel_cross_1d,
    kernel_diag,
    kernel_diag_gradient,
    kernel_gradients,
    kernel_gram_1d,
    kernel_lag_derivative,
)
from .kron import (
    DENSE_GUARD,
    KhatriRaoCross,
    KroneckerPSD,
    jitter_cholesky,
    khatri_rao_apply,
    khatri_rao_apply_transpose,
    khatri_rao_partial,
    kr_quadratic_diag,
    kr_quadratic_diag_factors,
    kron_apply_except,
    kron_logdet,
    kron_mvm,
    kron_solve,
    kron_trace_product,
    mode_apply,
    mode_gram,
    prod_except,
)

LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_SCHEMA = "blitzgp.checkpoint/1"
LOG_DIAG_LIMIT = 40.0


@dataclass
class InducingGrid:
    """Per-dimension strictly increasing coordinates; the grid is their Cartesian product."""

    points: tuple

    def __post_init__(self):
        pts = []
        for d, p in enumerate(self.points):
            p = np.array(p, dtype=np.float64).ravel()
            if p.size < 1:
                raise DegenerateGridError(f"grid dimension {d} is empty")
            if not np.all(np.isfinite(p)):
                raise DegenerateGridError(f"grid dimension {d} has non-finite coordinates")
            if p.size > 1 and not np.all(np.diff(p) > 0):
                raise DegenerateGridError(f"grid dimension {d} is not strictly increasing")
            p.setflags(write=False)
            pts.append(p)
        if not pts:
            raise DegenerateGridError("grid needs at least one dimension")
        self.points = tuple(pts)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(p.size for p in self.points)

    @property
    def size(self) -> int:
        return math.prod(self.sizes)

    @property
    def ndim(self) -> int:
        return len(self.points)

    def locations(self) -> np.ndarray:
        """All ``M x D`` grid locations in the flattened (dimension 0 slowest) order."""
        mesh = np.meshgrid(*self.points, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


def _tril_size(n: int) -> int:
    return n * (n + 1) // 2


def chol_to_vector(chol: np.ndarray) -> np.ndarray:
    """Lower-triangular factor -> unconstrained vector (diagonal stored as log)."""
    n = chol.shape[0]
    rows, cols = np.tril_indices(n)
    vals = chol[rows, cols].copy()
    diag = rows == cols
    vals[diag] = np.log(vals[diag])
    return vals


def vector_to_chol(vec: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`chol_to_vector`.

    Log-diagonal entries are clamped to ``[-LOG_DIAG_LIMIT, LOG_DIAG_LIMIT]`` so a
    wild line-search step cannot underflow the factor to singularity.
    """
    rows, cols = np.tril_indices(n)
    vals = np.array(vec, dtype=np.float64)
    diag = rows == cols
    vals[diag] = np.exp(np.clip(vals[diag], -LOG_DIAG_LIMIT, LOG_DIAG_LIMIT))
    out = np.zeros((n, n))
    out[rows, cols] = vals
    return out


@dataclass
class VariationalState:
    """``q(u) = N(mean, kron_d L_d L_d^T)`` with positive-diagonal lower factors."""

    mean: np.ndarray
    chol_factors: list = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.array(self.mean, dtype=np.float64).ravel()
        facs = []
        for d, c in enumerate(self.chol_factors):
            c = np.tril(np.array(c, dtype=np.float64))
            if c.ndim != 2 or c.shape[0] != c.shape[1]:
                raise DimensionError(f"Cholesky factor {d} must be square")
            if not np.all(np.diag(c) > 0):
                raise DimensionError(f"Cholesky factor {d} needs a strictly positive diagonal")
            facs.append(c)
        self.chol_factors = facs
        if math.prod(c.shape[0] for c in facs) != self.mean.size:
            raise DimensionError("mean length does not match the Cholesky factor sizes")

    @classmethod
    def prior(cls, kmm: KroneckerPSD) -> "VariationalState":
        """``q = p``: zero mean and ``L_d = chol(K_d)``, so the KL term starts at zero."""
        return cls(np.zeros(kmm.size), [c.copy() for c in kmm.cholesky])

    def covariance_factors(self) -> list[np.ndarray]:
        return [c @ c.T for c in self.chol_factors]

    def covariance(self) -> KroneckerPSD:
        return KroneckerPSD(self.covariance_factors(), check_symmetric=False)

    def dense_covariance(self, guard: int = DENSE_GUARD) -> np.ndarray:
        return self.covariance().dense(guard)

    def log_det_covariance(self) -> float:
        m = self.mean.size
        return sum(
            (m // c.shape[0]) * 2.0 * float(np.sum(np.log(np.diag(c)))) for c in self.chol_factors
        )


class BlitzModel:
    """Grid-inducing SVGP with Kronecker-factored ``K_mm`` and ``S``.

    The Gram factors (``kmm``) are cached and rebuilt whenever the grid or the
    hyperparameters change. Parameter updates are single-writer.

    With ``whiten=True`` (the default) the optimiser sees ``m_w = L_K^{-1} m``
    and ``L_w,d = L_K,d^{-1} L_d`` instead of ``m`` and ``L_d``; the state and
    the bound are unchanged, only the coordinates differ. Grids much finer
    than the lengthscale make ``K_d`` ill-conditioned, and raw coordinates
    then take steps that wreck the KL term.
    """

    def __init__(
        self,
        grid: InducingGrid,
        hyper: GPHyperparams,
        vstate: VariationalState | None = None,
        optimize_grid: bool = False,
        whiten: bool = True,
    ):
        if grid.ndim != hyper.ndim:
            raise DimensionError(f"grid has {grid.ndim} dimensions, kernel has {hyper.ndim}")
        self._grid = grid
        self._hyper = hyper
        self._kmm = None
        self.optimize_grid = optimize_grid
        self.whiten = whiten
        self.vstate = vstate if vstate is not None else VariationalState.prior(self.kmm)
        if self.vstate.mean.size != grid.size:
            raise DimensionError("variational state does not match the grid size")
        self.seed = None
        self.iteration = 0

    @property
    def grid(self) -> InducingGrid:
        return self._grid

    @grid.setter
    def grid(self, value: InducingGrid):
        self._grid = value
        self._kmm = None

    @property
    def hyper(self) -> GPHyperparams:
        return self._hyper

    @hyper.setter
    def hyper(self, value: GPHyperparams):
        self._hyper = value
        self._kmm = None

    @property
    def kmm(self) -> KroneckerPSD:
        if self._kmm is None:
            self._kmm = KroneckerPSD(
                [kernel_gram_1d(self.hyper.kernel, d, z) for d, z in enumerate(self.grid.points)]
            )
        return self._kmm

    # parameter packing ------------------------------------------------

    def _layout(self) -> list[tuple[str, int]]:
        parts = [("hyper", self.hyper.n_params), ("mean", self.grid.size)]
        parts += [(f"chol[{d}]", _tril_size(s)) for d, s in enumerate(self.grid.sizes)]
        if self.optimize_grid:
            parts += [(f"grid[{d}]", s) for d, s in enumerate(self.grid.sizes)]
        return parts

    def get_params(self) -> np.ndarray:
        mean, chol = self.vstate.mean, self.vstate.chol_factors
        if self.whiten:
            kchol = self.kmm.cholesky
            mean = _tri_kron_solve(kchol, mean)
            chol = [solve_triangular(kc, c, lower=True, check_finite=False) for kc, c in zip(kchol, chol)]
        parts = [self.hyper.to_vector(), mean] + [chol_to_vector(c) for c in chol]
        if self.optimize_grid:
            parts += list(self.grid.points)
        return np.concatenate(parts)

    def set_params(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        chunks = {}
        for name, size in self._layout():
            chunks[name] = vec[pos : pos + size]
            pos += size
        if pos != vec.size:
            raise DimensionError(f"parameter vector has length {vec.size}, expected {pos}")
        self.hyper = self.hyper.with_vector(chunks["hyper"])
        if self.optimize_grid:
            self.grid = InducingGrid(tuple(chunks[f"grid[{d}]"] for d in range(self.grid.ndim)))
        mean = chunks["mean"].copy()
        chol = [vector_to_chol(chunks[f"chol[{d}]"], s) for d, s in enumerate(self.grid.sizes)]
        if self.whiten:
            kchol = self.kmm.cholesky
            mean = kron_mvm(kchol, mean)
            chol = [kc @ c for kc, c in zip(kchol, chol)]
        self.vstate = VariationalState(mean, chol)

    def param_names(self) -> list[str]:
        names = self.hyper.param_names()
        names += [f"mean[{j}]" for j in range(self.grid.size)]
        for d, s in enumerate(self.grid.sizes):
            rows, cols = np.tril_indices(s)
            names += [
                f"chol[{d}][{r},{c}]" + (" (log)" if r == c else "") for r, c in zip(rows, cols)
            ]
        if self.optimize_grid:
            for d, s in enumerate(self.grid.sizes):
                names += [f"grid[{d}][{j}]" for j in range(s)]
        return names

    def objective(self, vec, x, y, scale: float = 1.0):
        """Trainer hook: set parameters, return ``(L3, gradient, info)``."""
        self.set_params(vec)
        value, grad = elbo_minibatch(self, (x, y), scale)
        return value, grad, {"kl": kl_term(self)}

    # serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": CHECKPOINT_SCHEMA,
            "grid": [p.tolist() for p in self.grid.points],
            "hyper": self.hyper.to_dict(),
            "mean": self.vstate.mean.tolist(),
            "chol_factors": [c.tolist() for c in self.vstate.chol_factors],
            "optimize_grid": self.optimize_grid,
            "whiten": self.whiten,
            "seed": self.seed,
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BlitzModel":
        if doc.get("schema") != CHECKPOINT_SCHEMA:
            raise SchemaError(f"unsupported checkpoint schema {doc.get('schema')!r}")
        grid = InducingGrid(tuple(doc["grid"]))
        vstate = VariationalState(np.array(doc["mean"]), [np.array(c) for c in doc["chol_factors"]])
        model = cls(
            grid,
            GPHyperparams.from_dict(doc["hyper"]),
            vstate,
            optimize_grid=doc.get("optimize_grid", False),
            whiten=doc.get("whiten", True),
        )
        model.seed = doc.get("seed")
        model.iteration = doc.get("iteration", 0)
        return model


def _factor_inverses(kmm: KroneckerPSD) -> list[np.ndarray]:
    return [cho_solve((c, True), np.eye(c.shape[0]), check_finite=False) for c in kmm.cholesky]


def kl_term(model: BlitzModel) -> float:
    """``KL(q(u) || p(u))`` evaluated factor by factor."""
    kmm = model.kmm
    vs = model.vstate
    trace = kron_trace_product(_factor_inverses(kmm), vs.covariance_factors())
    maha = float(vs.mean @ kron_solve(kmm, vs.mean))
    return float(0.5 * (trace + maha - kmm.size + kron_logdet(kmm) - vs.log_det_covariance()))


def _cross_blocks(model: BlitzModel, x: np.ndarray) -> list[np.ndarray]:
    kern = model.hyper.kernel
    return [kernel_cross_1d(kern, d, x[:, d], z) for d, z in enumerate(model.grid.points)]


def _chol_backward(chol: np.ndarray, chol_bar: np.ndarray) -> np.ndarray:
    """Reverse-mode Cholesky: map ``df/dL`` to ``df/dK`` for ``L = chol(K)``."""
    phi = np.tril(chol.T @ chol_bar)
    phi[np.diag_indices_from(phi)] *= 0.5
    tmp = solve_triangular(chol, phi, trans="T", lower=True, check_finite=False)
    return solve_triangular(chol, tmp.T, trans="T", lower=True, check_finite=False).T


def elbo_minibatch(model: BlitzModel, batch, scale: float = 1.0, with_grad: bool = True):
    """Minibatch estimate ``scale * sum_{i in batch} (per-datum terms) - KL``.

    Pass ``scale = N / B`` for an unbiased estimate of the full-data bound.
    Returns ``(value, gradient)`` where the gradient is w.r.t.
    ``model.get_params()`` (``None`` when ``with_grad`` is false).
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    x, y = batch
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).reshape(-1, model.grid.ndim)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"{x.shape[0]} inputs but {y.shape[0]} targets")

    hyper = model.hyper
    kern = hyper.kernel
    beta = hyper.beta
    grid = model.grid
    sizes = grid.sizes
    dims = grid.ndim
    big_m = grid.size
    kmm = model.kmm
    kchol = kmm.cholesky
    vs = model.vstate
    mean = vs.mean
    chol = vs.chol_factors
    s_fac = vs.covariance_factors()
    n = x.shape[0]

    cross = _cross_blocks(model, x)
    proj = [cho_solve((c, True), b.T, check_finite=False).T for c, b in zip(kchol, cross)]
    proj_kr = KhatriRaoCross(proj)
    # per-dimension pieces of k_i^T K^-1 k_i and a_i^T S a_i (rows factorise over dimensions)
    p_fac = kr_quadratic_diag_factors(KhatriRaoCross(cross), kmm, "inverse")
    q_fac = kr_quadratic_diag_factors(proj_kr, s_fac, "direct")
    prior_var = kernel_diag(kern, x)
    ktilde = prior_var - np.prod(p_fac, axis=1)
    strace = np.prod(q_fac, axis=1)
    mu = khatri_rao_apply(proj_kr, mean) if n else np.zeros(0)
    resid = y - mu

    data = scale * float(
        np.sum(0.5 * hyper.log_beta - 0.5 * LOG_2PI - 0.5 * beta * (resid**2 + ktilde + strace))
    )

    kinv = _factor_inverses(kmm)
    traces = np.array([float(np.sum(ki * sf)) for ki, sf in zip(kinv, s_fac)])
    alpha = kron_solve(kmm, mean)
    kl = 0.5 * (np.prod(traces) + float(mean @ alpha) - big_m + kron_logdet(kmm) - vs.log_det_covariance())
    value = float(data - kl)
    if not with_grad:
        return value, None

    # raw partial derivatives w.r.t. m, L_d, C_d (cross blocks) and K_d (Gram factors)
    g_hyp = np.zeros(hyper.n_params)
    p_out = prod_except(p_fac) if n else np.zeros((0, dims))
    q_out = prod_except(q_fac) if n else np.zeros((0, dims))
    t_out = prod_except(traces[None, :])[0]
    sb = scale * beta
    g_cross, g_gram, g_chol = [], [], []
    for d in range(dims):
        share = big_m // sizes[d]
        a_d, c_d = proj[d], cross[d]
        dmu = khatri_rao_partial(proj_kr, mean, d) if n else np.zeros((0, sizes[d]))
        # A_d = C_d K_d^{-1}; C_d also enters directly through ktilde
        g_a = sb * (resid[:, None] * dmu + 0.5 * p_out[:, d, None] * c_d - q_out[:, d, None] * (a_d @ s_fac[d]))
        g_cross.append(0.5 * sb * p_out[:, d, None] * a_d + g_a @ kinv[d])
        maha_grad = mode_gram(alpha, kron_apply_except(kmm.factors, alpha, d), sizes, d)
        dkl_dk = 0.5 * (-t_out[d] * kinv[d] @ s_fac[d] @ kinv[d] - maha_grad + share * kinv[d])
        g_gram.append(-a_d.T @ g_a @ kinv[d] - dkl_dk)
        data_l = -sb * (a_d.T @ (q_out[:, d, None] * a_d)) @ chol[d]
        dkl_dl = t_out[d] * kinv[d] @ chol[d] - share * np.diag(1.0 / np.diag(chol[d]))
        g_chol.append(np.tril(data_l - dkl_dl))
    g_mean = (sb * khatri_rao_apply_transpose(proj_kr, resid) if n else 0.0) - alpha

    chol_params = chol
    if model.whiten:
        # m = (kron L_K) m_w and L_d = L_K,d L_w,d, so K_d also moves m and S
        m_w = _tri_kron_solve(kchol, mean)
        chol_params = [solve_triangular(kc, c, lower=True, check_finite=False) for kc, c in zip(kchol, chol)]
        for d in range(dims):
            lk_bar = mode_gram(g_mean, kron_apply_except(kchol, m_w, d), sizes, d)
            lk_bar = np.tril(lk_bar + g_chol[d] @ chol_params[d].T)
            g_gram[d] = g_gram[d] + _chol_backward(kchol[d], lk_bar)
            g_chol[d] = np.tril(kchol[d].T @ g_chol[d])
        g_mean = kron_mvm([kc.T for kc in kchol], g_mean)

    g_grid = []
    for d in range(dims):
        z = grid.points[d]
        for idx, dc in kernel_gradients(kern, d, x[:, d], z):
            g_hyp[idx] += float(np.sum(g_cross[d] * dc))
        for idx, dk in kernel_gradients(kern, d, z, z):
            g_hyp[idx] += float(np.sum(g_gram[d] * dk))
        if model.optimize_grid:
            dcdz = -kernel_lag_derivative(kern, d, x[:, d], z)
            gk_dk = g_gram[d] * kernel_lag_derivative(kern, d, z, z)
            g_grid.append(np.sum(g_cross[d] * dcdz, axis=0) + gk_dk.sum(axis=1) - gk_dk.sum(axis=0))
    g_hyp[: kern.n_params] += -0.5 * sb * n * kernel_diag_gradient(kern)
    g_hyp[-1] = scale * float(np.sum(0.5 - 0.5 * beta * (resid**2 + ktilde + strace)))

    g_chol_vec = []
    for d in range(dims):
        rows, cols = np.tril_indices(sizes[d])
        gvec = g_chol[d][rows, cols]
        diag = rows == cols
        gvec[diag] *= np.diag(chol_params[d])
        g_chol_vec.append(gvec)
    grad = np.concatenate([g_hyp, g_mean] + g_chol_vec + g_grid)
    return value, grad


def _tri_kron_solve(chols, v) -> np.ndarray:
    """Solve ``(kron_d L_d) x = v`` for lower-triangular factors."""
    sizes = [c.shape[0] for c in chols]
    x = np.asarray(v, dtype=np.float64).reshape(sizes)
    for d, c in enumerate(chols):
        x = mode_apply(x, d, lambda m, c=c: solve_triangular(c, m, lower=True, check_finite=False))
    return x.reshape(-1)


def elbo(model: BlitzModel, x, y) -> float:
    """Full-batch bound value."""
    return elbo_minibatch(model, (x, y), 1.0, with_grad=False)[0]


def predict(model: BlitzModel, xs, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Latent predictive mean and variance; add ``1/beta`` for observations."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64)).reshape(-1, model.grid.ndim)
    kmm = model.kmm
    s_fac = model.vstate.covariance_factors()
    means, variances = [], []
    prior = kernel_diag(model.hyper.kernel, xs)
    for start in range(0, xs.shape[0], chunk):
        part = xs[start : start + chunk]
        cross = KhatriRaoCross(_cross_blocks(model, part))
        proj = KhatriRaoCross(
            [cho_solve((c, True), b.T, check_finite=False).T for c, b in zip(kmm.cholesky, cross.blocks)]
        )
        means.append(khatri_rao_apply(proj, model.vstate.mean))
        variances.append(
            prior[start : start + chunk]
            - kr_quadratic_diag(cross, kmm, "inverse")
            + kr_quadratic_diag(proj, s_fac, "direct")
        )
    if not means:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(means), np.maximum(np.concatenate(variances), 0.0)


# ---------------------------------------------------------------------------
# dense helpers (guarded; test-scale studies only)
# ---------------------------------------------------------------------------


def _dense_pieces(model: BlitzModel, x, guard: int):
    if model.grid.size > guard:
        raise GuardError(f"M={model.grid.size} exceeds the dense guard {guard}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).reshape(-1, model.grid.ndim)
    kmm = model.kmm.dense(guard)
    knm = KhatriRaoCross(_cross_blocks(model, x)).dense(guard)
    return x, kmm, knm


def optimal_dense_q(model: BlitzModel, x, y, guard: int = DENSE_GUARD) -> tuple[np.ndarray, np.ndarray]:
    """Unconstrained optimum ``(m*, S*)`` of the bound for fixed hyperparameters.

    ``S* = (beta K^-1 K_mn K_nm K^-1 + K^-1)^-1 = K (K + beta K_mn K_nm)^-1 K`` and
    ``m* = beta S* K^-1 K_mn y``; built densely.
    """
    x, kmm, knm = _dense_pieces(model, x, guard)
    y = np.asarray(y, dtype=np.float64).ravel()
    beta = model.hyper.beta
    sigma = kmm + beta * knm.T @ knm
    chol, _ = jitter_cholesky(0.5 * (sigma + sigma.T))
    s_opt = kmm @ cho_solve((chol, True), kmm, check_finite=False)
    m_opt = beta * kmm @ cho_solve((chol, True), knm.T @ y, check_finite=False)
    return m_opt, 0.5 * (s_opt + s_opt.T)


def elbo_dense(model: BlitzModel, x, y, mean, cov, guard: int = DENSE_GUARD) -> float:
    """Full-batch bound for an arbitrary dense variational covariance ``cov``."""
    x, kmm, knm = _dense_pieces(model, x, guard)
    y = np.asarray(y, dtype=np.float64).ravel()
    beta = model.hyper.beta
    kchol, _ = jitter_cholesky(kmm)
    proj = cho_solve((kchol, True), knm.T, check_finite=False).T
    mu = proj @ mean
    ktilde = kernel_diag(model.hyper.kernel, x) - np.sum(proj * knm, axis=1)
    strace = np.sum((proj @ cov) * proj, axis=1)
    data = np.sum(0.5 * math.log(beta) - 0.5 * LOG_2PI - 0.5 * beta * ((y - mu) ** 2 + ktilde + strace))
    schol, _ = jitter_cholesky(cov)
    big_m = kmm.shape[0]
    kl = 0.5 * (
        np.sum(cho_solve((kchol, True), cov, check_finite=False).diagonal())
        + mean @ cho_solve((kchol, True), mean, check_finite=False)
        - big_m
        + 2.0 * np.sum(np.log(np.diag(kchol)))
        - 2.0 * np.sum(np.log(np.diag(schol)))
    )
    return float(data - kl)


def collapsed_bound(model: BlitzModel, x, y) -> float:
    """Collapsed bound: the dense bound evaluated at ``optimal_dense_q``."""
    m_opt, s_opt = optimal_dense_q(model, x, y)
    return elbo_dense(model, x, y, m_opt, s_opt)
