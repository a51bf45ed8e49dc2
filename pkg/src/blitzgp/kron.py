"""Kronecker and Khatri-Rao structured linear algebra.

Layout convention: dimension 0 is the slowest-varying index of the flattened
grid (row-major), so a vector of length ``M = M_0 * ... * M_{D-1}`` reshapes
to ``(M_0, ..., M_{D-1})`` and ``kron_mvm([A, B], v) == np.kron(A, B) @ v``.

Nothing here ever builds the full ``M x M`` Kronecker matrix or the full
``N x M`` Khatri-Rao matrix, except the explicit ``dense()`` helpers which are
guarded and meant for tests.
"""

from __future__ import annotations

import math
import threading
from typing import Sequence, Union

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .errors import DecompositionError, DimensionError, GuardError, NumericError

DENSE_GUARD = 4096
JITTER_START = 1e-10
JITTER_MAX = 1e-4
SYMMETRY_RTOL = 1e-12

# Working-set cap (in float64 elements) for row-chunked Khatri-Rao products.
_CHUNK_ELEMS = 1 << 18


def jitter_cholesky(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a``, adding diagonal jitter if needed.

    Jitter starts at ``1e-10 * mean(diag)`` and grows tenfold up to
    ``1e-4 * mean(diag)``. Returns the factor and the jitter actually added.
    """
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite entries in matrix passed to Cholesky")
    try:
        return cholesky(a, lower=True, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(a)))
    if not scale > 0:
        raise DecompositionError("matrix has non-positive mean diagonal")
    n = a.shape[0]
    rel = JITTER_START
    while rel <= JITTER_MAX * (1 + 1e-9):
        jitter = rel * scale
        try:
            return cholesky(a + jitter * np.eye(n), lower=True, check_finite=False), jitter
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise DecompositionError(
        f"matrix not positive definite after jitter {JITTER_MAX:g} * mean(diag)"
    )


def _as_factor(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"Kronecker factor must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite entries in Kronecker factor")
    a.setflags(write=False)
    return a


class KroneckerPSD:
    """Positive-definite matrix stored as its per-dimension Kronecker factors.

    Factor Choleskys are computed once on first use (under a lock) and are
    read-only afterwards, so instances can be shared across threads.
    """

    def __init__(self, factors: Sequence[np.ndarray], check_symmetric: bool = True):
        if len(factors) == 0:
            raise DimensionError("KroneckerPSD needs at least one factor")
        self.factors = tuple(_as_factor(f) for f in factors)
        if check_symmetric:
            for d, f in enumerate(self.factors):
                tol = SYMMETRY_RTOL * max(1.0, float(np.max(np.abs(f))))
                if np.max(np.abs(f - f.T)) > tol:
                    raise DimensionError(f"factor {d} is not symmetric")
        self._chol = None
        self._jitter = None
        self._lock = threading.Lock()

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def size(self) -> int:
        return math.prod(self.sizes)

    @property
    def ndim(self) -> int:
        return len(self.factors)

    @property
    def cholesky(self) -> tuple[np.ndarray, ...]:
        """Per-factor lower Cholesky factors (jittered if required)."""
        if self._chol is None:
            with self._lock:
                if self._chol is None:
                    out = [jitter_cholesky(f) for f in self.factors]
                    self._jitter = tuple(j for _, j in out)
                    self._chol = tuple(c for c, _ in out)
        return self._chol

    @property
    def jitter(self) -> tuple[float, ...]:
        self.cholesky
        return self._jitter

    def dense(self, guard: int = DENSE_GUARD) -> np.ndarray:
        if self.size > guard:
            raise GuardError(f"refusing to materialise {self.size}x{self.size} Kronecker matrix")
        out = np.ones((1, 1))
        for f in self.factors:
            out = np.kron(out, f)
        return out

    def __repr__(self) -> str:
        return f"KroneckerPSD(sizes={self.sizes})"


class KhatriRaoCross:
    """``N x M`` matrix whose row ``i`` is ``kron(blocks[0][i], ..., blocks[D-1][i])``."""

    def __init__(self, blocks: Sequence[np.ndarray]):
        if len(blocks) == 0:
            raise DimensionError("KhatriRaoCross needs at least one block")
        bs = [np.asarray(b, dtype=np.float64) for b in blocks]
        for b in bs:
            if b.ndim != 2:
                raise DimensionError(f"Khatri-Rao block must be 2-d, got shape {b.shape}")
        if len({b.shape[0] for b in bs}) != 1:
            raise DimensionError("Khatri-Rao blocks must share the row count")
        self.blocks = tuple(bs)

    @property
    def n_rows(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(b.shape[1] for b in self.blocks)

    @property
    def size(self) -> int:
        return math.prod(self.sizes)

    @property
    def ndim(self) -> int:
        return len(self.blocks)

    def rows(self, idx) -> "KhatriRaoCross":
        return KhatriRaoCross([b[idx] for b in self.blocks])

    def dense(self, guard: int = DENSE_GUARD) -> np.ndarray:
        if self.size > guard:
            raise GuardError(f"refusing to materialise Khatri-Rao matrix with {self.size} columns")
        out = np.ones((self.n_rows, 1))
        for b in self.blocks:
            out = (out[:, :, None] * b[:, None, :]).reshape(self.n_rows, out.shape[1] * b.shape[1])
        return out

    def __repr__(self) -> str:
        return f"KhatriRaoCross(n_rows={self.n_rows}, sizes={self.sizes})"


FactorsLike = Union[KroneckerPSD, Sequence[np.ndarray]]


def _factors(a: FactorsLike) -> tuple[np.ndarray, ...]:
    if isinstance(a, KroneckerPSD):
        return a.factors
    return tuple(np.asarray(f, dtype=np.float64) for f in a)


def _check_vector(v, size: int, what: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != size:
        raise DimensionError(f"{what} has shape {v.shape}, expected ({size},)")
    if not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite entries in {what}")
    return v


def mode_apply(x: np.ndarray, d: int, fn) -> np.ndarray:
    """Apply ``fn`` (acting on the rows of an ``M_d x k`` matrix) along tensor axis ``d``."""
    moved = np.moveaxis(x, d, 0)
    shape = moved.shape
    out = fn(moved.reshape(shape[0], -1))
    return np.moveaxis(out.reshape((out.shape[0],) + shape[1:]), 0, d)


def _kron_apply(mats: Sequence, v: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """Multiply ``v`` by ``kron(*mats)``; ``None`` entries act as identity."""
    x = v.reshape(tuple(sizes))
    for d, a in enumerate(mats):
        if a is not None:
            x = np.moveaxis(np.tensordot(a, x, axes=(1, d)), 0, d)
    return x.reshape(-1)


def kron_mvm(a: FactorsLike, v) -> np.ndarray:
    """``(A_0 kron ... kron A_{D-1}) @ v`` in ``O(M * sum_d M_d)`` time."""
    facs = _factors(a)
    for f in facs:
        if f.ndim != 2:
            raise DimensionError("Kronecker factors must be 2-d")
    rows = [f.shape[0] for f in facs]
    cols = [f.shape[1] for f in facs]
    v = _check_vector(v, math.prod(cols))
    x = v.reshape(cols)
    for d, f in enumerate(facs):
        x = np.moveaxis(np.tensordot(f, x, axes=(1, d)), 0, d)
    return x.reshape(math.prod(rows))


def kron_apply_except(factors: Sequence[np.ndarray], v: np.ndarray, skip: int) -> np.ndarray:
    """Apply every factor except ``factors[skip]`` (identity in that slot)."""
    mats = [None if d == skip else f for d, f in enumerate(factors)]
    return _kron_apply(mats, np.asarray(v, dtype=np.float64), [f.shape[0] for f in factors])


def kron_solve(a: KroneckerPSD, v) -> np.ndarray:
    """Solve ``(kron A_d) r = v`` via per-factor Cholesky solves."""
    v = _check_vector(v, a.size)
    x = v.reshape(a.sizes)
    for d, c in enumerate(a.cholesky):
        x = mode_apply(x, d, lambda m, c=c: cho_solve((c, True), m, check_finite=False))
    return x.reshape(-1)


def kron_logdet(a: KroneckerPSD) -> float:
    """``log|kron A_d| = sum_d (M / M_d) log|A_d|``."""
    total = 0.0
    m = a.size
    for c, md in zip(a.cholesky, a.sizes):
        total += (m // md) * 2.0 * float(np.sum(np.log(np.diag(c))))
    return total


def kron_trace_product(a: FactorsLike, b: FactorsLike) -> float:
    """``tr(kron A_d @ kron B_d) = prod_d tr(A_d B_d)``."""
    fa, fb = _factors(a), _factors(b)
    if len(fa) != len(fb) or any(x.shape != y.shape for x, y in zip(fa, fb)):
        raise DimensionError("Kronecker operands have mismatched factor sizes")
    out = 1.0
    for x, y in zip(fa, fb):
        out *= float(np.sum(x * y.T))
    return out


def _row_chunks(n: int, width: int):
    step = max(1, _CHUNK_ELEMS // max(1, width))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _kr_contract(blocks: Sequence[np.ndarray], v: np.ndarray, skip: int | None = None) -> np.ndarray:
    """Row-wise contraction of the tensor ``v`` with Khatri-Rao rows.

    With ``skip=None`` returns the length-N vector ``K @ v``. With ``skip=d``
    the dimension ``d`` is left uncontracted and an ``N x M_d`` matrix is
    returned, i.e. the derivative of ``K @ v`` with respect to block ``d``.
    """
    sizes = [b.shape[1] for b in blocks]
    n = blocks[0].shape[0]
    x = v.reshape(sizes)
    order = [d for d in range(len(blocks)) if d != skip]
    if skip is not None:
        x = np.moveaxis(x, skip, -1)
    keep = sizes[skip] if skip is not None else 1
    if not order:
        return np.broadcast_to(x.reshape(1, keep), (n, keep)).copy()
    x0 = x.reshape(sizes[order[0]], -1)
    out = np.empty((n, keep))
    for rows in _row_chunks(n, x0.shape[1]):
        t = blocks[order[0]][rows] @ x0
        for d in order[1:]:
            t = np.einsum("nj,njr->nr", blocks[d][rows], t.reshape(t.shape[0], sizes[d], -1))
        out[rows] = t.reshape(-1, keep)
    return out


def khatri_rao_apply(k: KhatriRaoCross, v) -> np.ndarray:
    """``K @ v`` for a Khatri-Rao ``K``; extra memory is bounded per row chunk."""
    v = _check_vector(v, k.size)
    return _kr_contract(k.blocks, v)[:, 0]


def khatri_rao_partial(k: KhatriRaoCross, v, d: int) -> np.ndarray:
    """Gradient of ``(K @ v)_i`` with respect to row ``i`` of block ``d``."""
    v = _check_vector(v, k.size)
    return _kr_contract(k.blocks, v, skip=d)


def khatri_rao_apply_transpose(k: KhatriRaoCross, w) -> np.ndarray:
    """``K.T @ w`` accumulated over row chunks."""
    w = _check_vector(w, k.n_rows, "weight vector")
    blocks = k.blocks
    sizes = k.sizes
    head = math.prod(sizes[:-1])
    acc = np.zeros((head, sizes[-1]))
    for rows in _row_chunks(k.n_rows, head):
        t = w[rows, None]
        for b in blocks[:-1]:
            br = b[rows]
            t = (t[:, :, None] * br[:, None, :]).reshape(t.shape[0], -1)
        acc += t.T @ blocks[-1][rows]
    return acc.reshape(-1)


def khatri_rao_rowdot(v: KhatriRaoCross, w: KhatriRaoCross) -> np.ndarray:
    """Row-wise inner products of two Khatri-Rao matrices.

    ``sum(kron(v_i0, v_i1, ...) * kron(w_i0, w_i1, ...))`` factorises into
    ``prod_d sum(v_id * w_id)``, costing ``O(N * sum_d M_d)``.
    """
    if v.sizes != w.sizes or v.n_rows != w.n_rows:
        raise DimensionError("Khatri-Rao operands have mismatched shapes")
    out = np.ones(v.n_rows)
    for bv, bw in zip(v.blocks, w.blocks):
        out *= np.einsum("ij,ij->i", bv, bw)
    return out


def kr_quadratic_diag_factors(k: KhatriRaoCross, a: FactorsLike, mode: str = "direct") -> np.ndarray:
    """Per-dimension pieces ``q_id = k_id^T A_d^{+-1} k_id`` as an ``N x D`` array.

    The product across columns is ``diag(K A^{+-1} K^T)``.
    """
    if mode not in ("direct", "inverse"):
        raise ValueError(f"mode must be 'direct' or 'inverse', got {mode!r}")
    facs = _factors(a)
    if len(facs) != k.ndim or any(f.shape[0] != s for f, s in zip(facs, k.sizes)):
        raise DimensionError("Khatri-Rao columns do not match Kronecker factor sizes")
    out = np.empty((k.n_rows, k.ndim))
    if mode == "inverse":
        if not isinstance(a, KroneckerPSD):
            a = KroneckerPSD(facs)
        for d, (b, c) in enumerate(zip(k.blocks, a.cholesky)):
            out[:, d] = np.einsum("ji,ji->i", b.T, cho_solve((c, True), b.T, check_finite=False))
    else:
        for d, (b, f) in enumerate(zip(k.blocks, facs)):
            out[:, d] = np.einsum("ij,ij->i", b @ f, b)
    return out


def kr_quadratic_diag(k: KhatriRaoCross, a: FactorsLike, mode: str = "direct") -> np.ndarray:
    """``diag(K A K^T)`` (``mode='direct'``) or ``diag(K A^{-1} K^T)`` (``'inverse'``)."""
    return np.prod(kr_quadratic_diag_factors(k, a, mode), axis=1)


def mode_gram(x: np.ndarray, y: np.ndarray, sizes: Sequence[int], d: int) -> np.ndarray:
    """``G[j, j'] = sum over all other indices of x[.., j, ..] * y[.., j', ..]``."""
    xm = np.moveaxis(np.asarray(x).reshape(tuple(sizes)), d, 0).reshape(sizes[d], -1)
    ym = np.moveaxis(np.asarray(y).reshape(tuple(sizes)), d, 0).reshape(sizes[d], -1)
    return xm @ ym.T


def prod_except(f: np.ndarray) -> np.ndarray:
    """Column-wise leave-one-out products of an ``N x D`` array (no division)."""
    n, dims = f.shape
    left = np.ones((n, dims))
    right = np.ones((n, dims))
    for d in range(1, dims):
        left[:, d] = left[:, d - 1] * f[:, d - 1]
    for d in range(dims - 2, -1, -1):
        right[:, d] = right[:, d + 1] * f[:, d + 1]
    return left * right
