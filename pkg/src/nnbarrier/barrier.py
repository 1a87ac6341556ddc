"""Stochastic barrier certificates for neural-network dynamic models.

A certificate is a polynomial ``B`` with ``B >= 0`` everywhere, ``B <= eta`` on
the initial set, ``B >= 1`` outside the safe set and a one-step expected
increase of at most ``beta`` inside the safe set.  Those four facts bound the
probability of leaving the safe set within ``N`` steps by ``eta + beta * N``.

The expected increase is certified per partition region over the joint
variables ``(x, y)`` where ``y`` is any point inside the network's envelope at
``x``; the Gaussian noise enters through :func:`nnbarrier.poly.expect_shifted`.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box, Partition, SemiAlgebraicSet, box_to_polynomials, unsafe_decomposition
from .model import ProblemSpec
from .poly import Polynomial, expect_shifted, from_string, to_string
from .relax import BoundMode, LinearEnvelope
from .sos import OPTIMAL, SosExpr, SosProgram
from .sos.program import sum_exprs

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
BETA_CAP = 1.0


class BarrierDegreeError(ValueError):
    pass


class SynthesisError(RuntimeError):
    def __init__(self, status: str, message: str):
        self.status = status
        super().__init__(message)


def check_barrier_degree(degree: int) -> None:
    """Reject barrier degrees that cannot give a useful certificate.

    A nonnegative polynomial of odd degree is impossible and a nonnegative
    affine function on all of R^n is constant, which forces the bound to zero.
    """
    if not isinstance(degree, (int, np.integer)):
        raise BarrierDegreeError(f"barrier degree must be an integer, got {degree!r}")
    if degree < 2:
        raise BarrierDegreeError(
            f"barrier degree {degree} < 2: a nonnegative affine barrier is constant and only certifies probability 0"
        )
    if degree % 2:
        raise BarrierDegreeError(f"barrier degree {degree} is odd; SOS barriers need even degree")


lemma1_guard = check_barrier_degree


def safety_probability(eta: float, beta: float, horizon: int) -> float:
    return float(min(1.0, max(0.0, 1.0 - (eta + beta * horizon))))


def beta_threshold(threshold: float, eta: float, horizon: int) -> float:
    """Largest per-region increase compatible with reaching ``threshold`` given ``eta``."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    return (1.0 - threshold - eta) / horizon


@dataclass
class BarrierCertificate:
    B: Polynomial
    eta: float
    beta: float
    horizon: int
    P_s: float
    mode: str
    degree: int
    per_region_beta: dict[int, float] = field(default_factory=dict)
    alpha: float = 1.0
    solver_beta: float | None = None
    backend: str = ""
    timings: dict[str, float] = field(default_factory=dict)

    def recompute(self) -> None:
        """Refresh ``beta`` and ``P_s`` from the per-region table."""
        if self.per_region_beta:
            self.beta = float(max(self.per_region_beta.values()))
        self.P_s = safety_probability(self.eta, self.beta, self.horizon)

    def to_dict(self, partition: Partition | None = None) -> dict:
        rows = []
        for rid in sorted(self.per_region_beta):
            row = {"region_id": rid, "beta": self.per_region_beta[rid]}
            if partition is not None:
                row["lower"] = partition[rid].lower.tolist()
                row["upper"] = partition[rid].upper.tolist()
            rows.append(row)
        exps, coefs = self.B.as_arrays()
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "B": to_string(self.B),
            "B_arity": self.B.arity,
            "B_terms": [[e.tolist(), float(c)] for e, c in zip(exps, coefs)],
            "degree": self.degree,
            "eta": self.eta,
            "beta": self.beta,
            "alpha": self.alpha,
            "horizon": self.horizon,
            "P_s": self.P_s,
            "mode": self.mode,
            "solver_beta": self.solver_beta,
            "backend": self.backend,
            "per_region_beta": rows,
            "timings": self.timings,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BarrierCertificate":
        arity = int(doc["B_arity"])
        if "B_terms" in doc:
            B = Polynomial(arity, {tuple(e): c for e, c in doc["B_terms"]})
        else:
            B = from_string(doc["B"], arity)
        return cls(
            B=B,
            eta=float(doc["eta"]),
            beta=float(doc["beta"]),
            horizon=int(doc["horizon"]),
            P_s=float(doc["P_s"]),
            mode=str(doc["mode"]),
            degree=int(doc["degree"]),
            per_region_beta={int(r["region_id"]): float(r["beta"]) for r in doc.get("per_region_beta", [])},
            alpha=float(doc.get("alpha", 1.0)),
            solver_beta=doc.get("solver_beta"),
            backend=doc.get("backend", ""),
            timings=dict(doc.get("timings", {})),
        )

    def to_json(self, partition: Partition | None = None) -> str:
        return json.dumps(self.to_dict(partition), indent=2)


# --------------------------------------------------------------------------
# joint-variable constraint pieces
# --------------------------------------------------------------------------


def _affine_row(a: np.ndarray, b: float, arity: int, offset: int = 0) -> Polynomial:
    terms = {(0,) * arity: float(b)}
    for j, v in enumerate(a):
        if v != 0.0:
            e = [0] * arity
            e[offset + j] = 1
            terms[tuple(e)] = float(v)
    return Polynomial(arity, terms)


def _interval_bounds(env: LinearEnvelope) -> tuple[np.ndarray, np.ndarray]:
    if env.ibp_lo is not None:
        return env.ibp_lo, env.ibp_hi
    return env.constant_bounds()


EXACT_ROW_TOL = 1e-12


def exact_rows(env: LinearEnvelope, mode: BoundMode | str) -> dict[int, tuple[np.ndarray, float]]:
    """Outputs whose envelope pins ``y_i`` to an affine function of ``x``.

    For such rows the sandwich ``-(y_i - f_i(x))^2 >= 0`` has empty interior,
    which makes the SOS program ill-posed; callers substitute ``y_i`` instead.
    """
    mode = BoundMode(mode)
    lo, hi = _interval_bounds(env)
    n = env.region.dim
    out = {}
    for i in range(env.dim_out):
        if hi[i] - lo[i] <= EXACT_ROW_TOL:
            out[i] = (np.zeros(n), 0.5 * (lo[i] + hi[i]))
        elif (
            mode is BoundMode.LINEAR
            and np.max(np.abs(env.A_up[i] - env.A_low[i])) <= EXACT_ROW_TOL
            and abs(env.b_up[i] - env.b_low[i]) <= EXACT_ROW_TOL
        ):
            out[i] = (0.5 * (env.A_up[i] + env.A_low[i]), 0.5 * (env.b_up[i] + env.b_low[i]))
    return out


def joint_reduction(n: int, env: LinearEnvelope, mode: BoundMode | str) -> tuple[np.ndarray, np.ndarray, dict]:
    """Affine map ``(x, y) = M z + c`` from the reduced joint variables ``z``.

    ``z`` holds ``x`` followed by the outputs not listed by :func:`exact_rows`;
    exact outputs are replaced by their affine value so they leave the program.
    """
    exact = exact_rows(env, mode)
    free = [i for i in range(env.dim_out) if i not in exact]
    M = np.zeros((2 * n, n + len(free)))
    c = np.zeros(2 * n)
    M[:n, :n] = np.eye(n)
    for k, i in enumerate(free):
        M[n + i, n + k] = 1.0
    for i, (a, b) in exact.items():
        M[n + i, :n] = a
        c[n + i] = b
    return M, c, exact


def sandwich_constraints(env: LinearEnvelope, mode: BoundMode | str) -> list[Polynomial]:
    """Polynomials nonnegative whenever ``y`` lies in the envelope at ``x``.

    Interval mode gives ``(hi - y)(y - lo)`` per output.  Linear mode adds the
    affine sandwich ``(upper(x) - y)(y - lower(x))`` on top of the interval
    one, so every interval-mode certificate is also a linear-mode certificate.
    The polynomials are in the reduced variables of :func:`joint_reduction`.
    """
    mode = BoundMode(mode)
    n = env.region.dim
    m = env.dim_out
    arity = n + m
    lo, hi = _interval_bounds(env)
    M, c, exact = joint_reduction(n, env, mode)
    out = []
    for i in range(m):
        y = _affine_row(np.eye(m)[i], 0.0, arity, offset=n)
        interval = (Polynomial.constant(hi[i], arity) - y) * (y - Polynomial.constant(lo[i], arity))
        if i in exact:
            interval = interval.substitute_affine(M, c)
            if interval.degree > 0:
                out.append(interval)
            continue
        out.append(interval.substitute_affine(M, c))
        if mode is BoundMode.LINEAR:
            up = _affine_row(env.A_up[i], env.b_up[i], arity)
            low = _affine_row(env.A_low[i], env.b_low[i], arity)
            lin = (up - y) * (y - low)
            if not lin.allclose(interval, rtol=0.0, atol=1e-15):
                out.append(lin.substitute_affine(M, c))
    return out


class _BarrierPieces:
    """Caches the expectation and embeddings of each Gram coefficient of ``B``."""

    def __init__(self, B_expr: SosExpr, variances: np.ndarray):
        n = B_expr.arity
        self.n = n
        self.Bx = B_expr.map_polys(lambda p: p.embed(2 * n, 0))
        self.EBy = B_expr.map_polys(lambda p: expect_shifted(p, variances).embed(2 * n, n))

    def region_condition(self, region: Box, env: LinearEnvelope, mode: BoundMode) -> tuple[SosExpr, SemiAlgebraicSet]:
        """``B(x) - E[B(y + v)]`` and the region's constraint set, in reduced joint variables."""
        M, c, exact = joint_reduction(self.n, env, mode)
        arity = M.shape[1]
        if exact:
            gap = (self.Bx - self.EBy).map_polys(lambda p: p.substitute_affine(M, c))
        else:
            gap = self.Bx - self.EBy
        hx = [h.embed(arity, 0) for h in box_to_polynomials(region).constraints]
        cset = SemiAlgebraicSet(tuple(hx) + tuple(sandwich_constraints(env, mode)), arity)
        return gap, cset


def hessian_form(B: SosExpr) -> SosExpr:
    """``sum_ij w_i w_j d^2 B / dx_i dx_j`` over the joint variables ``(x, w)``."""
    n = B.arity
    terms = []
    for i in range(n):
        for j in range(n):
            hij = B.map_polys(lambda p, i=i, j=j: p.derivative(i).derivative(j).embed(2 * n, 0))
            e = [0] * (2 * n)
            e[n + i] += 1
            e[n + j] += 1
            terms.append(hij * Polynomial.monomial(e))
    return sum_exprs(terms, 2 * n)


# --------------------------------------------------------------------------
# synthesis
# --------------------------------------------------------------------------


def synthesize(
    spec: ProblemSpec,
    partition: Partition,
    envelopes: Sequence[LinearEnvelope],
    mode: BoundMode | str = BoundMode.LINEAR,
    eta_cap: float | None = None,
    degree: int | None = None,
    backend: str = "auto",
    multiplier_degree: int | None = None,
    region_betas: bool = True,
    enforce_degree_guard: bool = True,
    threads: int = 1,
    convex: bool = False,
) -> BarrierCertificate:
    """Build and solve the barrier program; returns the certificate.

    With ``eta_cap`` the program bounds ``eta`` by the cap and minimises
    ``beta`` alone.  ``enforce_degree_guard=False`` admits degree 0 (a constant
    barrier), which can only certify probability 0.  ``convex=True`` also
    requires the Hessian form ``w' H_B(x) w`` to be SOS in ``(x, w)`` so that
    ``B`` is convex and its minimiser is found reliably.
    """
    mode = BoundMode(mode)
    m = spec.barrier_degree if degree is None else degree
    if enforce_degree_guard:
        check_barrier_degree(m)
    elif m < 0 or m % 2:
        raise BarrierDegreeError(f"barrier degree {m} must be even and nonnegative")
    if len(envelopes) != len(partition):
        raise ValueError(f"{len(envelopes)} envelopes for {len(partition)} regions")
    if eta_cap is not None and not 0.0 <= eta_cap <= 1.0:
        raise ValueError("eta_cap must lie in [0, 1]")

    t0 = time.perf_counter()
    n = spec.dim
    N = spec.horizon
    prog = SosProgram("barrier")
    Bvar = prog.new_sos_var(n, m, label="B")
    B = Bvar.expr()
    eta = prog.new_scalar("eta", 0.0, 1.0 if eta_cap is None else float(eta_cap))
    beta = prog.new_scalar("beta", 0.0, 1.0)

    init_expr, _ = prog.putinar_block(
        SosExpr.of(eta, n) - B, box_to_polynomials(spec.initial_set), multiplier_degree, m, label="init:"
    )
    prog.assert_sos(init_expr, "initial")
    for k, slab in enumerate(unsafe_decomposition(spec.state_space, spec.safe_set)):
        e, _ = prog.putinar_block(B - 1.0, slab, multiplier_degree, m, label=f"unsafe{k}:")
        prog.assert_sos(e, f"unsafe{k}")

    if convex and m >= 2:
        prog.assert_sos(hessian_form(B), "convexity")

    pieces = _BarrierPieces(B, spec.noise.variances)
    for q, (region, env) in enumerate(zip(partition.regions, envelopes)):
        gap, cset = pieces.region_condition(region, env, mode)
        e, _ = prog.putinar_block(gap + SosExpr.of(beta, gap.arity), cset, multiplier_degree, m, label=f"region{q}:")
        prog.assert_sos(e, f"region{q}")

    if eta_cap is None:
        prog.minimize({eta: 1.0, beta: float(N)})
    else:
        prog.minimize({beta: 1.0})
    t_build = time.perf_counter() - t0
    sol = prog.solve(backend)
    if sol.status != OPTIMAL:
        raise SynthesisError(sol.status, f"barrier program {sol.status}: {sol.message}")
    t_solve = time.perf_counter() - t0 - t_build

    Bpoly = sol.poly(Bvar)
    eta_v = sol.value(eta)
    beta_v = sol.value(beta)
    cert = BarrierCertificate(
        B=Bpoly,
        eta=eta_v,
        beta=beta_v,
        horizon=N,
        P_s=safety_probability(eta_v, beta_v, N),
        mode=mode.value,
        degree=m,
        solver_beta=beta_v,
        backend=sol.backend,
        timings={"sos_build": t_build, "sos_solve": t_solve},
    )
    if region_betas:
        t1 = time.perf_counter()
        betas = region_beta_table(
            Bpoly, partition, envelopes, spec.noise.variances, mode, backend=backend,
            multiplier_degree=multiplier_degree, threads=threads,
        )
        cert.per_region_beta = betas
        # each region's value certifies that region, so the maximum is a valid beta
        cert.beta = min(beta_v, max(betas.values())) if betas else beta_v
        cert.P_s = safety_probability(cert.eta, cert.beta, N)
        cert.timings["region_beta"] = time.perf_counter() - t1
    return cert


def eval_beta_region(
    B: Polynomial,
    region: Box,
    envelope: LinearEnvelope,
    variances,
    control_shift=None,
    mode: BoundMode | str = BoundMode.LINEAR,
    backend: str = "auto",
    multiplier_degree: int | None = None,
) -> float:
    """Smallest certified one-step expected increase of a fixed ``B`` on ``region``.

    ``control_shift`` (the vector ``g u``) moves the envelope.  Returns the
    conservative cap 1.0 when the program cannot be solved.
    """
    mode = BoundMode(mode)
    n = B.arity
    env = envelope if control_shift is None else envelope.shifted(control_shift)
    prog = SosProgram("region-beta")
    bq = prog.new_scalar("beta_q", 0.0, np.inf)
    pieces = _BarrierPieces(SosExpr.of(B, n), np.asarray(variances, dtype=float))
    m = max(B.degree, 0)
    m += m % 2
    gap, cset = pieces.region_condition(region, env, mode)
    gamma = gap + SosExpr.of(bq, gap.arity)
    e, _ = prog.putinar_block(gamma, cset, multiplier_degree, m)
    prog.assert_sos(e, "region")
    prog.minimize({bq: 1.0})
    sol = prog.solve(backend)
    if sol.status != OPTIMAL:
        log.warning("region %s: beta evaluation %s (%s); using cap %.1f", region, sol.status, sol.message, BETA_CAP)
        return BETA_CAP
    return float(min(BETA_CAP, max(0.0, sol.value(bq))))


def region_beta_table(
    B: Polynomial,
    partition: Partition,
    envelopes: Sequence[LinearEnvelope],
    variances,
    mode: BoundMode | str,
    shifts: dict[int, np.ndarray] | None = None,
    backend: str = "auto",
    multiplier_degree: int | None = None,
    threads: int = 1,
) -> dict[int, float]:
    shifts = shifts or {}

    def one(q):
        return eval_beta_region(
            B, partition[q], envelopes[q], variances, shifts.get(q), mode, backend, multiplier_degree
        )

    ids = list(range(len(partition)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            vals = list(pool.map(one, ids))
    else:
        vals = [one(q) for q in ids]
    return dict(zip(ids, vals))


# --------------------------------------------------------------------------
# sampling audit
# --------------------------------------------------------------------------


@dataclass
class AuditReport:
    min_B: float
    max_B_initial_minus_eta: float
    min_B_unsafe: float
    max_gap_minus_beta: float
    worst_region: int
    tol: float

    @property
    def checks(self) -> dict[str, bool]:
        return {
            "nonnegative": self.min_B >= -self.tol,
            "initial": self.max_B_initial_minus_eta <= self.tol,
            "unsafe": self.min_B_unsafe >= 1.0 - self.tol,
            "martingale": self.max_gap_minus_beta <= self.tol,
        }

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def _audit_shell(spec: ProblemSpec) -> Box:
    safe = spec.safe_set
    pad = np.maximum(safe.widths, 1.0)
    lo = np.where(np.isfinite(spec.state_space.lower), np.minimum(spec.state_space.lower, safe.lower - pad), safe.lower - pad)
    hi = np.where(np.isfinite(spec.state_space.upper), np.maximum(spec.state_space.upper, safe.upper + pad), safe.upper + pad)
    return Box(lo, hi)


def audit_certificate(
    cert: BarrierCertificate,
    spec: ProblemSpec,
    partition: Partition,
    envelopes: Sequence[LinearEnvelope],
    samples: int = 100_000,
    pairs_per_region: int = 1000,
    rng: np.random.Generator | None = None,
    tol: float = 1e-6,
    shifts: dict[int, np.ndarray] | None = None,
) -> AuditReport:
    """Check the four barrier conditions at random points.

    Unsafe-set points are drawn from each slab intersected with a bounding
    shell around the safe set.  Martingale pairs draw ``x`` in the region and
    ``y`` uniformly between the envelope bounds at ``x``.
    """
    rng = rng or np.random.default_rng(0)
    B = cert.B
    n = spec.dim
    shell = _audit_shell(spec)
    pts = shell.sample(rng, samples)
    min_B = float(np.min(B.eval_batch(pts)))
    pts0 = spec.initial_set.sample(rng, samples)
    max_init = float(np.max(B.eval_batch(pts0))) - cert.eta

    min_unsafe = np.inf
    per_slab = max(1, samples // (2 * n))
    for i in range(n):
        for side in ("upper", "lower"):
            bound = spec.safe_set.upper[i] if side == "upper" else spec.safe_set.lower[i]
            if not np.isfinite(bound):
                continue
            P = shell.sample(rng, per_slab)
            if side == "upper":
                P[:, i] = bound + rng.random(per_slab) * (shell.upper[i] - bound)
            else:
                P[:, i] = bound - rng.random(per_slab) * (bound - shell.lower[i])
            min_unsafe = min(min_unsafe, float(np.min(B.eval_batch(P))))

    EB = expect_shifted(B, spec.noise.variances)
    shifts = shifts or {}
    worst, worst_q = -np.inf, -1
    for q, (region, env) in enumerate(zip(partition.regions, envelopes)):
        if q in shifts:
            env = env.shifted(shifts[q])
        X = region.sample(rng, pairs_per_region)
        lo_c, hi_c = _interval_bounds(env)
        lo = np.maximum(env.lower(X), lo_c) if cert.mode == BoundMode.LINEAR.value else np.broadcast_to(lo_c, X.shape)
        hi = np.minimum(env.upper(X), hi_c) if cert.mode == BoundMode.LINEAR.value else np.broadcast_to(hi_c, X.shape)
        hi = np.maximum(hi, lo)
        Y = lo + rng.random(X.shape) * (hi - lo)
        g = EB.eval_batch(Y) - B.eval_batch(X)
        beta_ref = cert.beta
        v = float(np.max(g)) - beta_ref
        if v > worst:
            worst, worst_q = v, q
    return AuditReport(min_B, max_init, float(min_unsafe), float(worst), worst_q, tol)
