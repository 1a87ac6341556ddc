"""Reference primal-dual interior-point method for LP + SDP standard form.

Solves ``min c^T x  s.t.  A x = b,  x in K`` where ``K`` is a nonnegative
orthant times a product of PSD cones (vectorised with the scaled upper
triangle), together with the dual ``max b^T y  s.t.  c - A^T y in K``.

Search directions are HKM with a Mehrotra predictor-corrector step.  The
Schur complement of each PSD block is assembled by :mod:`nnbarrier._kernels`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .. import _kernels
from .program import SQRT2, svec_len

log = logging.getLogger(__name__)


@dataclass
class IpmSettings:
    max_iter: int = 150
    tol_gap: float = 1e-9
    tol_feas: float = 1e-9
    tol_infeas: float = 1e-8
    step_fraction: float = 0.98
    # looser acceptance used when the iteration stalls after getting close
    tol_accept: float = 1e-6


@dataclass
class IpmResult:
    status: str  # optimal | infeasible | dual_infeasible | max_iter | stalled
    x_lp: np.ndarray
    X: list[np.ndarray]
    y: np.ndarray
    iterations: int
    info: dict = field(default_factory=dict)


class _Block:
    """One PSD block: its constraint rows in full-matrix coordinate form."""

    def __init__(self, k: int, A_blk: sp.csr_matrix):
        self.k = k
        A_blk = A_blk.tocsr()
        self.A = A_blk
        self.AT = A_blk.T.tocsr()
        nz_rows = np.flatnonzero(np.diff(A_blk.indptr))
        self.rows = nz_rows
        sub = A_blk[nz_rows].tocoo()
        # svec index t -> (i, j) with i <= j
        jj = np.floor((np.sqrt(8.0 * np.arange(svec_len(k)) + 1.0) - 1.0) / 2.0).astype(np.int64)
        ii = np.arange(svec_len(k)) - jj * (jj + 1) // 2
        self.svec_i, self.svec_j = ii, jj
        self.svec_scale = np.where(ii == jj, 1.0, SQRT2)
        order = np.lexsort((sub.col, sub.row))
        r_, t_, v_ = sub.row[order], sub.col[order], sub.data[order]
        pi, pj = ii[t_], jj[t_]
        diag = pi == pj
        rr = np.concatenate([r_[diag], r_[~diag], r_[~diag]])
        pp = np.concatenate([pi[diag], pi[~diag], pj[~diag]])
        qq = np.concatenate([pi[diag], pj[~diag], pi[~diag]])
        vv = np.concatenate([v_[diag], v_[~diag] / SQRT2, v_[~diag] / SQRT2])
        o = np.argsort(rr, kind="stable")
        self.rows_p = np.ascontiguousarray(pp[o], dtype=np.int64)
        self.rows_q = np.ascontiguousarray(qq[o], dtype=np.int64)
        self.vals = np.ascontiguousarray(vv[o], dtype=np.float64)
        counts = np.bincount(rr, minlength=len(nz_rows))
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def svec(self, Z: np.ndarray) -> np.ndarray:
        return Z[self.svec_i, self.svec_j] * self.svec_scale

    def smat(self, v: np.ndarray) -> np.ndarray:
        Z = np.zeros((self.k, self.k))
        w = v / self.svec_scale
        Z[self.svec_i, self.svec_j] = w
        Z[self.svec_j, self.svec_i] = w
        return Z

    def apply(self, Z: np.ndarray) -> np.ndarray:
        return self.A @ self.svec(Z)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self.smat(self.AT @ y)


def _sym(Z):
    return 0.5 * (Z + Z.T)


def _max_step_lp(x, dx):
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


def _max_step_psd(X, dX):
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        return 0.0
    Li = la.solve_triangular(L, np.eye(X.shape[0]), lower=True)
    W = Li @ dX @ Li.T
    lam = np.linalg.eigvalsh(_sym(W))[0]
    return np.inf if lam >= 0 else -1.0 / lam


def solve_lp_sdp(
    c_lp: np.ndarray,
    A_lp: sp.csr_matrix,
    c_blocks: list[np.ndarray],
    A_blocks: list[sp.csr_matrix],
    block_dims: list[int],
    b: np.ndarray,
    settings: IpmSettings | None = None,
) -> IpmResult:
    """Solve the standard-form problem; ``c_blocks`` are svec vectors."""
    st = settings or IpmSettings()
    m = b.shape[0]
    nl = c_lp.shape[0]
    A_lp = sp.csr_matrix(A_lp)
    A_lpT = A_lp.T.tocsr()
    blocks = [_Block(k, Ab) for k, Ab in zip(block_dims, A_blocks)]
    C = [blk.smat(cb) for blk, cb in zip(blocks, c_blocks)]
    nu = nl + sum(block_dims)

    norm_b = np.linalg.norm(b)
    norm_c = math.sqrt(float(c_lp @ c_lp) + sum(float(cb @ cb) for cb in c_blocks))

    # initial point
    row_norm = np.sqrt(np.asarray(A_lp.multiply(A_lp).sum(axis=1)).ravel())
    for blk in blocks:
        row_norm = np.sqrt(row_norm**2 + np.asarray(blk.A.multiply(blk.A).sum(axis=1)).ravel())
    zeta_p = max(10.0, math.sqrt(max(block_dims, default=1)), float(np.max((1 + np.abs(b)) / (1 + row_norm), initial=1.0)))
    zeta_d = max(10.0, math.sqrt(max(block_dims, default=1)), norm_c)
    x = np.full(nl, zeta_p)
    s = np.full(nl, zeta_d)
    X = [zeta_p * np.eye(k) for k in block_dims]
    S = [zeta_d * np.eye(k) for k in block_dims]
    y = np.zeros(m)

    def A_apply(xl, Zs):
        out = A_lp @ xl if nl else np.zeros(m)
        for blk, Z in zip(blocks, Zs):
            out = out + blk.apply(Z)
        return out

    def AT_apply(v):
        return (A_lpT @ v if nl else np.zeros(0)), [blk.adjoint(v) for blk in blocks]

    status = "max_iter"
    info: dict = {}
    best = None  # (merit, x, X, y, info) of the best acceptable iterate
    it = 0
    for it in range(1, st.max_iter + 1):
        ATy_l, ATy_b = AT_apply(y)
        rp = b - A_apply(x, X)
        rd_l = c_lp - ATy_l - s
        rd_b = [Cj - Aj - Sj for Cj, Aj, Sj in zip(C, ATy_b, S)]
        gap = float(x @ s) + sum(float(np.sum(Xj * Sj)) for Xj, Sj in zip(X, S))
        mu = gap / max(nu, 1)
        pobj = float(c_lp @ x) + sum(float(np.sum(Cj * Xj)) for Cj, Xj in zip(C, X))
        dobj = float(b @ y)
        pinf = np.linalg.norm(rp) / (1.0 + norm_b)
        rd_norm = math.sqrt(float(rd_l @ rd_l) + sum(float(np.sum(R * R)) for R in rd_b))
        dinf = rd_norm / (1.0 + norm_c)
        relgap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        info = dict(pobj=pobj, dobj=dobj, pinf=pinf, dinf=dinf, relgap=relgap, mu=mu)
        log.debug("it %d pobj %.6e dobj %.6e pinf %.2e dinf %.2e gap %.2e", it, pobj, dobj, pinf, dinf, relgap)
        rgap = min(relgap, gap / (1 + abs(pobj)))
        if pinf < st.tol_feas and dinf < st.tol_feas and rgap < st.tol_gap:
            status = "optimal"
            break
        merit = max(pinf, dinf, rgap)
        if merit < st.tol_accept:
            if best is None or merit < best[0]:
                best = (merit, x.copy(), [Xj.copy() for Xj in X], y.copy(), dict(info))
        elif best is not None and pinf > 1e3 * max(best[4]["pinf"], 1e-12):
            log.debug("primal residual diverging; returning best iterate")
            break
        # certificate of primal infeasibility: A^T y in -K with b^T y > 0
        if dobj > 0:
            ray_l = c_lp - rd_l
            ray_norm = math.sqrt(float(ray_l @ ray_l) + sum(float(np.sum((Cj - R) ** 2)) for Cj, R in zip(C, rd_b)))
            if ray_norm / dobj < st.tol_infeas and pinf > st.tol_feas:
                status = "infeasible"
                break
        if pobj < 0 and pinf < st.tol_feas:
            ax = np.linalg.norm(A_apply(x, X))
            if ax / -pobj < st.tol_infeas and dinf > st.tol_feas:
                status = "dual_infeasible"
                break

        # Schur complement
        M = np.zeros((m, m))
        if nl:
            D = x / s
            M += (A_lp.multiply(D[None, :]) @ A_lpT).toarray()
        S_inv = []
        for blk, Xj, Sj in zip(blocks, X, S):
            Si = np.linalg.inv(Sj)
            Si = _sym(Si)
            S_inv.append(Si)
            if blk.rows.size == 0:
                continue
            Mb = _kernels.schur_block(blk.indptr, blk.rows_p, blk.rows_q, blk.vals, Xj, Si)
            M[np.ix_(blk.rows, blk.rows)] += Mb
        M = _sym(M)
        diag_scale = max(1.0, float(np.max(np.abs(np.diag(M))))) if m else 1.0
        factor = None
        for reg in (0.0, 1e-14, 1e-12, 1e-10, 1e-8):
            try:
                factor = la.cho_factor(M + reg * diag_scale * np.eye(m), check_finite=False)
                break
            except la.LinAlgError:
                continue

        def solve_M(rhs):
            if factor is None:
                return np.linalg.lstsq(M, rhs, rcond=None)[0]
            sol = la.cho_solve(factor, rhs, check_finite=False)
            # a few steps of iterative refinement against the unregularised M
            for _ in range(3):
                r = rhs - M @ sol
                if np.linalg.norm(r) <= 1e-14 * (1.0 + np.linalg.norm(rhs)):
                    break
                sol = sol + la.cho_solve(factor, r, check_finite=False)
            return sol

        def direction(R_l, R_b):
            # dx = R - D(rd) + D(A^T dy)
            Drd_l = x * rd_l / s if nl else np.zeros(0)
            Drd_b = [_sym(Xj @ R @ Si) for Xj, R, Si in zip(X, rd_b, S_inv)]
            rhs = rp - A_apply(R_l - Drd_l, [Rb - Db for Rb, Db in zip(R_b, Drd_b)])
            dy = solve_M(rhs)
            AdY_l, AdY_b = AT_apply(dy)
            ds_l = rd_l - AdY_l
            ds_b = [R - Ad for R, Ad in zip(rd_b, AdY_b)]
            dx_l = R_l - x * ds_l / s if nl else np.zeros(0)
            dx_b = [_sym(Rb - Xj @ dS @ Si) for Rb, Xj, dS, Si in zip(R_b, X, ds_b, S_inv)]
            return dx_l, dx_b, dy, ds_l, ds_b

        def step_lengths(dx_l, dx_b, ds_l, ds_b):
            ap = _max_step_lp(x, dx_l) if nl else np.inf
            ad = _max_step_lp(s, ds_l) if nl else np.inf
            for Xj, dX in zip(X, dx_b):
                ap = min(ap, _max_step_psd(Xj, dX))
            for Sj, dS in zip(S, ds_b):
                ad = min(ad, _max_step_psd(Sj, dS))
            return ap, ad

        # predictor
        R_l = -x
        R_b = [-Xj for Xj in X]
        dxa_l, dxa_b, _, dsa_l, dsa_b = direction(R_l, R_b)
        ap, ad = step_lengths(dxa_l, dxa_b, dsa_l, dsa_b)
        ap, ad = min(1.0, ap), min(1.0, ad)
        gap_aff = float((x + ap * dxa_l) @ (s + ad * dsa_l)) if nl else 0.0
        gap_aff += sum(
            float(np.sum((Xj + ap * dX) * (Sj + ad * dS))) for Xj, dX, Sj, dS in zip(X, dxa_b, S, dsa_b)
        )
        sigma = min(1.0, max(0.0, (gap_aff / max(gap, 1e-300)) ** 3))

        # corrector
        smu = sigma * mu
        R_l = (smu - dxa_l * dsa_l) / s - x if nl else np.zeros(0)
        R_b = [_sym(smu * Si - Xj - dXa @ dSa @ Si) for Si, Xj, dXa, dSa in zip(S_inv, X, dxa_b, dsa_b)]
        dx_l, dx_b, dy, ds_l, ds_b = direction(R_l, R_b)
        ap, ad = step_lengths(dx_l, dx_b, ds_l, ds_b)
        tau = st.step_fraction
        ap, ad = min(1.0, tau * ap), min(1.0, tau * ad)
        if ap < 1e-10 and ad < 1e-10:
            status = "stalled"
            break
        x = x + ap * dx_l
        X = [Xj + ap * dX for Xj, dX in zip(X, dx_b)]
        y = y + ad * dy
        s = s + ad * ds_l
        S = [Sj + ad * dS for Sj, dS in zip(S, ds_b)]
    if status != "optimal" and status not in ("infeasible", "dual_infeasible") and best is not None:
        _, x, X, y, info = best
        status = "optimal"
        info["inaccurate"] = True
    info["iterations"] = it
    return IpmResult(status, x, X, y, it, info)
