"""Backends for compiled SOS programs and post-solve validation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..poly import Polynomial
from .ipm import IpmSettings, solve_lp_sdp
from .program import ConicProblem, Scalar, SosExpr, SosProgram, SosVar, expr_value, gram_polynomial, smat, svec_len

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class Tolerances:
    equality: float = 1e-6
    eig_floor: float = -1e-7
    sample: float = 1e-6


DEFAULT_TOLERANCES = Tolerances()


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray
    scalars: np.ndarray
    grams: list[np.ndarray]
    objective: float
    residuals: dict
    backend: str
    offsets: list[int] = field(default_factory=list)
    solve_time: float = 0.0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def value(self, s: Scalar) -> float:
        return float(self.scalars[s.index])

    def gram(self, v: SosVar) -> np.ndarray:
        return self.grams[v.id]

    def poly(self, v: SosVar) -> Polynomial:
        return gram_polynomial(v, self.grams[v.id])

    def expr_poly(self, expr: SosExpr) -> Polynomial:
        return expr_value(expr, self.x, self.offsets)


def clarabel_available() -> bool:
    try:
        import clarabel  # noqa: F401
    except ImportError:
        return False
    return True


def resolve_backend(backend: str) -> str:
    if backend == "auto":
        return "clarabel" if clarabel_available() else "reference"
    if backend not in ("reference", "clarabel"):
        raise ValueError(f"unknown SOS backend {backend!r}")
    if backend == "clarabel" and not clarabel_available():
        raise ValueError("backend 'clarabel' requested but the clarabel package is not installed")
    return backend


# --------------------------------------------------------------------------
# reference backend
# --------------------------------------------------------------------------


def _solve_reference(prob: ConicProblem, settings: IpmSettings | None) -> tuple[str, np.ndarray, str]:
    n_s = prob.n_scalars
    m = prob.A.shape[0]
    A = prob.A.tocsc()
    A_s = A[:, :n_s]
    # scalar i = off[i] + T[i] @ x_lp
    T_rows, T_cols, T_vals = [], [], []
    off = np.zeros(n_s)
    bound_rows = []  # (lp column of p, lp column of slack, width)
    nl = 0
    for i in range(n_s):
        lo, hi = prob.lb[i], prob.ub[i]
        if np.isfinite(lo):
            off[i] = lo
            T_rows.append(i), T_cols.append(nl), T_vals.append(1.0)
            p = nl
            nl += 1
            if np.isfinite(hi):
                bound_rows.append((p, nl, hi - lo))
                nl += 1
        elif np.isfinite(hi):
            off[i] = hi
            T_rows.append(i), T_cols.append(nl), T_vals.append(-1.0)
            nl += 1
        else:
            T_rows += [i, i]
            T_cols += [nl, nl + 1]
            T_vals += [1.0, -1.0]
            nl += 2
    T = sp.csr_matrix((T_vals, (T_rows, T_cols)), shape=(n_s, nl))
    nb = len(bound_rows)
    br, bc, bv = [], [], []
    for r, (p, t, _) in enumerate(bound_rows):
        br += [r, r]
        bc += [p, t]
        bv += [1.0, 1.0]
    B_rows = sp.csr_matrix((bv, (br, bc)), shape=(nb, nl))
    A_lp = sp.vstack([A_s @ T, B_rows]).tocsr()
    b_std = np.concatenate([prob.b - A_s @ off, np.array([w for _, _, w in bound_rows])])
    c_lp = T.T @ prob.c[:n_s]
    A_blocks, c_blocks = [], []
    for k, o in zip(prob.block_dims, prob.block_offsets):
        L = svec_len(k)
        A_blocks.append(sp.vstack([A[:, o : o + L], sp.csr_matrix((nb, L))]).tocsr())
        c_blocks.append(prob.c[o : o + L].copy())
    res = solve_lp_sdp(c_lp, A_lp, c_blocks, A_blocks, list(prob.block_dims), b_std, settings)
    x = np.zeros(prob.n_vars)
    x[:n_s] = off + T @ res.x_lp
    for k, o, Xj in zip(prob.block_dims, prob.block_offsets, res.X):
        iu = _svec_indices(k)
        x[o : o + svec_len(k)] = Xj[iu[0], iu[1]] * iu[2]
    status = {"optimal": OPTIMAL, "infeasible": INFEASIBLE}.get(res.status, NUMERICAL_FAILURE)
    msg = f"reference IPM: {res.status} after {res.iterations} iterations"
    return status, x, msg


def _svec_indices(k: int):
    t = np.arange(svec_len(k))
    j = np.floor((np.sqrt(8.0 * t + 1.0) - 1.0) / 2.0).astype(np.int64)
    i = t - j * (j + 1) // 2
    return i, j, np.where(i == j, 1.0, np.sqrt(2.0))


# --------------------------------------------------------------------------
# clarabel backend
# --------------------------------------------------------------------------


def _solve_clarabel(prob: ConicProblem, options: dict) -> tuple[str, np.ndarray, str]:
    import clarabel

    n = prob.n_vars
    n_s = prob.n_scalars
    blocks = [prob.A.tocsc()]
    rhs = [prob.b]
    cones = [clarabel.ZeroConeT(prob.A.shape[0])] if prob.A.shape[0] else []
    lb_idx = [i for i in range(n_s) if np.isfinite(prob.lb[i])]
    ub_idx = [i for i in range(n_s) if np.isfinite(prob.ub[i])]
    n_nn = len(lb_idx) + len(ub_idx)
    if n_nn:
        rows = np.arange(n_nn)
        cols = np.array(lb_idx + ub_idx)
        vals = np.concatenate([-np.ones(len(lb_idx)), np.ones(len(ub_idx))])
        blocks.append(sp.csc_matrix((vals, (rows, cols)), shape=(n_nn, n)))
        rhs.append(np.concatenate([-prob.lb[lb_idx], prob.ub[ub_idx]]))
        cones.append(clarabel.NonnegativeConeT(n_nn))
    for k, o in zip(prob.block_dims, prob.block_offsets):
        L = svec_len(k)
        blocks.append(sp.csc_matrix((-np.ones(L), (np.arange(L), o + np.arange(L))), shape=(L, n)))
        rhs.append(np.zeros(L))
        cones.append(clarabel.PSDTriangleConeT(k) if k > 1 else clarabel.NonnegativeConeT(1))
    A = sp.vstack(blocks).tocsc()
    A.sort_indices()
    b = np.concatenate(rhs)
    P = sp.csc_matrix((n, n))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = options.get("tol", 1e-9)
    settings.tol_gap_rel = options.get("tol", 1e-9)
    settings.tol_feas = options.get("tol", 1e-9)
    settings.max_iter = options.get("max_iter", 200)
    solver = clarabel.DefaultSolver(P, prob.c, A, b, cones, settings)
    sol = solver.solve()
    name = str(sol.status)
    x = np.array(sol.x, dtype=float)
    if "PrimalInfeasible" in name:
        status = INFEASIBLE
    elif name.endswith("Solved") or "AlmostSolved" in name:
        status = OPTIMAL
    else:
        status = NUMERICAL_FAILURE
    return status, x, f"clarabel: {name} after {sol.iterations} iterations"


# --------------------------------------------------------------------------
# dispatch and validation
# --------------------------------------------------------------------------


def validate(prob: ConicProblem, x: np.ndarray, tol: Tolerances = DEFAULT_TOLERANCES) -> tuple[dict, list[np.ndarray], bool]:
    eq = prob.A @ x - prob.b
    eq_max = float(np.max(np.abs(eq))) if eq.size else 0.0
    grams = [smat(x[o : o + svec_len(k)], k) for k, o in zip(prob.block_dims, prob.block_offsets)]
    min_eig = min((float(np.linalg.eigvalsh(G)[0]) for G in grams), default=0.0)
    s = x[: prob.n_scalars]
    bound_viol = float(np.max(np.concatenate([[0.0], prob.lb - s, s - prob.ub])))
    res = {"equality_max": eq_max, "min_gram_eig": min_eig, "bound_violation": bound_viol}
    ok = eq_max <= tol.equality and min_eig >= tol.eig_floor and bound_viol <= tol.equality
    return res, grams, ok


def solve_conic(
    prob: ConicProblem, backend: str = "auto", tolerances: Tolerances = DEFAULT_TOLERANCES, **options
) -> tuple[str, np.ndarray, dict, list[np.ndarray], str, str]:
    name = resolve_backend(backend)
    if prob.n_vars == 0:
        return OPTIMAL, np.zeros(0), {"equality_max": 0.0, "min_gram_eig": 0.0}, [], name, "empty program"
    if name == "clarabel":
        status, x, msg = _solve_clarabel(prob, options)
    else:
        status, x, msg = _solve_reference(prob, options.get("ipm_settings"))
    res, grams, ok = validate(prob, x, tolerances)
    if status == OPTIMAL and not ok:
        status = NUMERICAL_FAILURE
        msg += f"; rejected by validation {res}"
    return status, x, res, grams, name, msg


def solve_program(
    program: SosProgram, backend: str = "auto", tolerances: Tolerances = DEFAULT_TOLERANCES, **options
) -> ConicSolution:
    t0 = time.perf_counter()
    prob = program.compile()
    status, x, res, grams, name, msg = solve_conic(prob, backend, tolerances, **options)
    n_s = prob.n_scalars
    scal = x[:n_s].copy() if x.size else np.zeros(n_s)
    if status == OPTIMAL:
        scal = np.clip(scal, prob.lb, prob.ub)
        x = x.copy()
        x[:n_s] = scal
    obj = float(prob.c @ x) if x.size else 0.0
    log.debug("%s: %s (%s)", program.name, status, msg)
    return ConicSolution(
        status=status,
        x=x,
        scalars=scal,
        grams=grams,
        objective=obj,
        residuals=res,
        backend=name,
        offsets=prob.block_offsets,
        solve_time=time.perf_counter() - t0,
        message=msg,
    )


# --------------------------------------------------------------------------
# post-hoc audit
# --------------------------------------------------------------------------


@dataclass
class CertificateReport:
    expression_flags: list[tuple[str, float]]
    eigen_flags: list[tuple[str, float]]
    min_values: dict[str, float]
    min_eigs: dict[str, float]

    @property
    def ok(self) -> bool:
        return not self.expression_flags and not self.eigen_flags


def check_certificate(
    program: SosProgram,
    solution: ConicSolution,
    samples: int = 1000,
    rng: np.random.Generator | None = None,
    scale: float = 2.0,
    tol: float = DEFAULT_TOLERANCES.sample,
    eig_floor: float = DEFAULT_TOLERANCES.eig_floor,
) -> CertificateReport:
    """Evaluate every asserted expression at random points and recheck Gram spectra.

    Asserted expressions are global sums of squares, so any sampling
    distribution is valid; points are uniform on ``[-scale, scale]^arity``.
    """
    rng = rng or np.random.default_rng(0)
    expr_flags, eig_flags = [], []
    min_vals, min_eigs = {}, {}
    for con in program.constraints:
        p = solution.expr_poly(con.expr)
        pts = rng.uniform(-scale, scale, size=(samples, con.expr.arity))
        v = float(np.min(p.eval_batch(pts))) if con.expr.arity else float(p.eval(np.zeros(0)))
        min_vals[con.name] = v
        if v < -tol:
            expr_flags.append((con.name, v))
    for var in program.grams:
        G = solution.grams[var.id]
        e = float(np.linalg.eigvalsh(G)[0]) if G.size else 0.0
        label = var.label or f"gram{var.id}"
        min_eigs[label] = e
        if e < eig_floor:
            eig_flags.append((label, e))
    return CertificateReport(expr_flags, eig_flags, min_vals, min_eigs)
