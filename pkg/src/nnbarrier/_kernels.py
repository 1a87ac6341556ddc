"""Numeric inner loops with a numba path and a pure-numpy path.

The numba kernels are used when numba imports cleanly and the environment
variable ``NNBARRIER_DISABLE_NUMBA`` is not set to a truthy value.  Both paths
compute the same quantities; the test-suite runs them against each other and
``benchmarks/bench_kernels.py`` times them.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("NNBARRIER_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG in {"1", "true", "yes", "on"}

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled by NNBARRIER_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def use_numba() -> bool:
    return HAVE_NUMBA


# --------------------------------------------------------------------------
# polynomial evaluation at many points
# --------------------------------------------------------------------------


def poly_eval_batch_numpy(exps: np.ndarray, coefs: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_t coefs[t] * prod_i points[:, i] ** exps[t, i]``."""
    n_pts, arity = points.shape
    if exps.shape[0] == 0:
        return np.zeros(n_pts)
    if arity == 0:
        return np.full(n_pts, coefs.sum())
    max_deg = int(exps.max())
    # powers[d, p, i] = points[p, i] ** d
    powers = np.empty((max_deg + 1, n_pts, arity))
    powers[0] = 1.0
    for d in range(1, max_deg + 1):
        powers[d] = powers[d - 1] * points
    out = np.zeros(n_pts)
    chunk = max(1, 4_000_000 // max(1, n_pts))
    cols = np.arange(arity)
    for start in range(0, exps.shape[0], chunk):
        e = exps[start : start + chunk]
        # (terms, points, arity) -> product over arity
        mon = powers[e, :, cols[None, :]]  # (terms, arity, points)
        out += coefs[start : start + chunk] @ mon.prod(axis=1)
    return out


def schur_block_numpy(
    indptr: np.ndarray,
    rows_p: np.ndarray,
    rows_q: np.ndarray,
    vals: np.ndarray,
    X: np.ndarray,
    S_inv: np.ndarray,
) -> np.ndarray:
    """Dense HKM Schur block ``M_ij = tr(A_i X A_j S^-1)`` for one PSD block.

    Row ``i`` of the block is given in full-matrix coordinate form by the
    slice ``indptr[i]:indptr[i+1]`` of ``rows_p``, ``rows_q``, ``vals``.
    """
    r = indptr.shape[0] - 1
    k = X.shape[0]
    A = np.zeros((r, k, k))
    row_of = np.repeat(np.arange(r), np.diff(indptr))
    np.add.at(A, (row_of, rows_p, rows_q), vals)
    G = X @ A @ S_inv
    return A.reshape(r, k * k) @ G.reshape(r, k * k).T


if HAVE_NUMBA:

    @njit(cache=True)
    def _poly_eval_batch_nb(exps, coefs, points):  # pragma: no cover - compiled
        n_pts, arity = points.shape
        n_terms = exps.shape[0]
        out = np.zeros(n_pts)
        for p in range(n_pts):
            acc = 0.0
            for t in range(n_terms):
                m = coefs[t]
                for i in range(arity):
                    e = exps[t, i]
                    if e != 0:
                        base = points[p, i]
                        v = 1.0
                        for _ in range(e):
                            v *= base
                        m *= v
                acc += m
            out[p] = acc
        return out

    @njit(cache=True)
    def _schur_block_nb(indptr, rows_p, rows_q, vals, X, S_inv):  # pragma: no cover
        r = indptr.shape[0] - 1
        k = X.shape[0]
        M = np.zeros((r, r))
        W = np.empty((k, k))
        for j in range(r):
            # W = X A_j S^-1 built from the sparse entries of A_j
            W[:, :] = 0.0
            for f in range(indptr[j], indptr[j + 1]):
                p = rows_p[f]
                q = rows_q[f]
                v = vals[f]
                for a in range(k):
                    xa = v * X[a, p]
                    if xa != 0.0:
                        for c in range(k):
                            W[a, c] += xa * S_inv[q, c]
            # M_ij = <A_i, W>; A_i symmetric
            for i in range(j, r):
                acc = 0.0
                for e in range(indptr[i], indptr[i + 1]):
                    acc += vals[e] * W[rows_p[e], rows_q[e]]
                M[i, j] = acc
                M[j, i] = acc
        return M


def poly_eval_batch(exps: np.ndarray, coefs: np.ndarray, points: np.ndarray) -> np.ndarray:
    exps = np.ascontiguousarray(exps, dtype=np.int64)
    coefs = np.ascontiguousarray(coefs, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    if HAVE_NUMBA and points.shape[1] > 0 and exps.shape[0] > 0:
        return _poly_eval_batch_nb(exps, coefs, points)
    return poly_eval_batch_numpy(exps, coefs, points)


def schur_block(indptr, rows_p, rows_q, vals, X, S_inv, prefer_sparse: bool | None = None) -> np.ndarray:
    """HKM Schur complement contribution of one PSD block.

    The numba kernel works on the sparse row representation and wins when
    rows carry few nonzeros; the numpy path densifies and uses BLAS.
    """
    if prefer_sparse is None:
        r = indptr.shape[0] - 1
        k = X.shape[0]
        nnz = max(1.0, (indptr[-1] - indptr[0]) / max(r, 1))
        # sparse cost: r*nnz*k^2 + r^2*nnz; dense BLAS cost: r*k^3 + r^2*k^2 at higher throughput
        prefer_sparse = 8.0 * (r * nnz * k * k + r * r * nnz) < r * k**3 + r * r * k * k
    if HAVE_NUMBA and prefer_sparse:
        return _schur_block_nb(indptr, rows_p, rows_q, vals, X, S_inv)
    return schur_block_numpy(indptr, rows_p, rows_q, vals, X, S_inv)
