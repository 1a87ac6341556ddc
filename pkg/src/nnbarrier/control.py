"""Minimally-invasive per-region controllers.

Regions whose certified one-step increase is too large for the safety
threshold get a constant control input chosen by a small LP that steers the
network's envelope towards the minimiser of the barrier.  The outer loop
trades the initial-set level ``eta`` against the per-region budget.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.stats import qmc

from .barrier import (
    BarrierCertificate,
    SynthesisError,
    beta_threshold,
    eval_beta_region,
    region_beta_table,
    safety_probability,
    synthesize,
)
from .geometry import Box, Partition
from .model import ControlStructure, ProblemError, ProblemSpec
from .poly import Polynomial
from .relax import BoundMode, LinearEnvelope

log = logging.getLogger(__name__)

# a region counts as over budget only if it exceeds the threshold by this much
FLAG_SLACK = 1e-8


# --------------------------------------------------------------------------
# policy
# --------------------------------------------------------------------------


@dataclass
class ControlPolicy:
    control: ControlStructure
    entries: dict[int, np.ndarray] = field(default_factory=dict)

    def set(self, region_id: int, u) -> None:
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.shape[0] != self.control.dim:
            raise ValueError(f"control has length {u.shape[0]}, expected {self.control.dim}")
        if np.any(u < self.control.u_lower) or np.any(u > self.control.u_upper):
            raise ValueError(f"control {u} outside the admissible set")
        self.entries[int(region_id)] = u

    def u(self, region_id: int) -> np.ndarray:
        if region_id in self.entries:
            return self.entries[region_id]
        return np.zeros(self.control.dim)

    def shift(self, region_id: int) -> np.ndarray:
        return self.control.g @ self.u(region_id)

    def shifts(self) -> dict[int, np.ndarray]:
        return {q: self.control.g @ u for q, u in self.entries.items()}

    def lookup(self, partition: Partition, points) -> np.ndarray:
        """Controls for a batch of states; zero outside the partition."""
        pts = np.atleast_2d(points)
        ids = partition.locate(pts)
        out = np.zeros((pts.shape[0], self.control.dim))
        for q, u in self.entries.items():
            out[ids == q] = u
        return out

    def __len__(self) -> int:
        return len(self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region_id"] + [f"u_{i + 1}" for i in range(self.control.dim)])
        for q in sorted(self.entries):
            w.writerow([q] + [repr(float(v)) for v in self.entries[q]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, control: ControlStructure) -> "ControlPolicy":
        pol = cls(control)
        rows = list(csv.reader(io.StringIO(text)))
        for row in rows[1:]:
            if row:
                pol.set(int(row[0]), [float(v) for v in row[1:]])
        return pol


def controlled_fraction(policy: ControlPolicy | None, partition: Partition) -> float:
    if policy is None or len(partition) == 0:
        return 0.0
    return len(policy.entries) / len(partition)


# --------------------------------------------------------------------------
# barrier minimiser
# --------------------------------------------------------------------------


@dataclass
class BarrierMin:
    x_star: np.ndarray
    value: float
    restarts_agreeing: int
    grad_norm: float
    on_boundary: bool
    starts: int


def _start_points(domain: Box, count: int, seed: int) -> np.ndarray:
    corners = domain.corners()
    n_c = min(len(corners), count // 2)
    if n_c < len(corners):
        idx = np.linspace(0, len(corners) - 1, n_c).round().astype(int)
        corners = corners[idx]
    n_lhs = count - len(corners)
    pts = [corners]
    if n_lhs > 0:
        lhs = qmc.LatinHypercube(d=domain.dim, seed=seed).random(n_lhs)
        pts.append(qmc.scale(lhs, domain.lower, domain.upper))
    return np.vstack(pts)


def find_barrier_min(
    B: Polynomial,
    domain: Box,
    starts: int = 32,
    seed: int = 0,
    max_iter: int = 5000,
    tol: float = 1e-12,
    agree_tol: float = 1e-6,
) -> BarrierMin:
    """Multi-start projected gradient descent with backtracking on a box."""
    if B.degree < 2:
        raise ValueError("barrier minimisation needs a polynomial of degree >= 2")
    lo, hi = domain.lower, domain.upper
    grads = B.gradient()

    def grad(X):
        return np.column_stack([g.eval_batch(X) for g in grads])

    X = _start_points(domain, starts, seed)
    f = B.eval_batch(X)
    G = grad(X)
    t = np.full(X.shape[0], 1.0)
    active = np.ones(X.shape[0], bool)
    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        Xa, fa, Ga, ta = X[idx], f[idx], G[idx], t[idx]
        for _ in range(60):
            cand = np.clip(Xa - ta[:, None] * Ga, lo, hi)
            fc = B.eval_batch(cand)
            step = cand - Xa
            ok = fc <= fa - (0.5 / ta) * np.sum(step * step, axis=1) + 1e-16
            if np.all(ok):
                break
            ta = np.where(ok, ta, 0.5 * ta)
        moved = np.sqrt(np.sum((cand - Xa) ** 2, axis=1))
        Gc = grad(cand)
        # Barzilai-Borwein guess for the next trial step
        s = cand - Xa
        yv = Gc - Ga
        sy = np.sum(s * yv, axis=1)
        ss = np.sum(s * s, axis=1)
        bb = np.where(sy > 1e-300, ss / np.maximum(sy, 1e-300), 2.0 * ta)
        X[idx], f[idx], G[idx] = cand, fc, Gc
        t[idx] = np.clip(bb, 1e-10, 1e6)
        done = moved <= tol * (1.0 + np.sqrt(np.sum(cand * cand, axis=1)))
        active[idx[done]] = False
    best = int(np.argmin(f))
    x_star = X[best].copy()
    g = G[best]
    free = ~(((x_star <= lo) & (g > 0)) | ((x_star >= hi) & (g < 0)))
    on_boundary = bool(np.any((x_star <= lo) | (x_star >= hi)))
    agree = int(np.count_nonzero(f <= f[best] + agree_tol))
    return BarrierMin(x_star, float(f[best]), agree, float(np.linalg.norm(g[free])), on_boundary, X.shape[0])


# --------------------------------------------------------------------------
# per-region control LP
# --------------------------------------------------------------------------


class LpMode(str, Enum):
    EXISTENTIAL = "existential"
    ROBUST = "robust"


@dataclass
class ControlLpResult:
    u: np.ndarray
    objective: float
    z: np.ndarray | None = None
    y: np.ndarray | None = None


class ControlLpError(RuntimeError):
    pass


def _existential_lp(x_star, region: Box, env: LinearEnvelope, g: np.ndarray):
    """Variables ``[theta, y, z_pos, z_neg, u]``; returns (c, A_ub, b_ub, bounds, slices)."""
    n = region.dim
    nc = g.shape[1]
    nv = 4 * n + nc
    th, yy, zp, zn, uu = (slice(0, n), slice(n, 2 * n), slice(2 * n, 3 * n), slice(3 * n, 4 * n), slice(4 * n, nv))
    I = np.eye(n)
    rows, rhs = [], []

    def row(blocks, b):
        r = np.zeros((n, nv))
        for sl, M in blocks:
            r[:, sl] = M
        rows.append(r)
        rhs.append(b)

    row([(yy, I), (th, -I)], x_star)  # y - x* <= theta
    row([(yy, -I), (th, -I)], -x_star)  # x* - y <= theta
    row([(zp, env.A_low), (zn, -env.A_low), (uu, g), (yy, -I)], -env.b_low)  # lower(z) + g u <= y
    row([(zp, -env.A_up), (zn, env.A_up), (uu, -g), (yy, I)], env.b_up)  # y <= upper(z) + g u
    row([(zp, I), (zn, -I)], region.upper)  # z <= upper face
    row([(zp, -I), (zn, I)], -region.lower)  # z >= lower face
    c = np.zeros(nv)
    c[th] = 1.0
    return c, np.vstack(rows), np.concatenate(rhs), (th, yy, zp, zn, uu)


def _robust_lp(x_star, region: Box, env: LinearEnvelope, g: np.ndarray):
    """Minimise the worst vertex distance: variables ``[t, theta_v (V*n), u]``."""
    n = region.dim
    nc = g.shape[1]
    V = region.corners()
    nv_ = V.shape[0]
    nv = 1 + nv_ * n + nc
    uu = slice(1 + nv_ * n, nv)
    rows, rhs = [], []
    for v_i, v in enumerate(V):
        th = slice(1 + v_i * n, 1 + (v_i + 1) * n)
        lo_v = env.A_low @ v + env.b_low
        up_v = env.A_up @ v + env.b_up
        # theta >= lo_v + g u - x*  and  theta >= x* - up_v - g u
        r = np.zeros((n, nv))
        r[:, th] = -np.eye(n)
        r[:, uu] = g
        rows.append(r)
        rhs.append(x_star - lo_v)
        r = np.zeros((n, nv))
        r[:, th] = -np.eye(n)
        r[:, uu] = -g
        rows.append(r)
        rhs.append(up_v - x_star)
        r = np.zeros((1, nv))
        r[0, th] = 1.0
        r[0, 0] = -1.0
        rows.append(r)
        rhs.append(np.zeros(1))
    c = np.zeros(nv)
    c[0] = 1.0
    return c, np.vstack(rows), np.concatenate(rhs), uu


def _linprog(c, A_ub, b_ub, bounds, A_eq=None, b_eq=None):
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise ControlLpError(f"control LP failed: {res.message}")
    return res


def synthesize_control_lp(
    x_star,
    region: Box,
    envelope: LinearEnvelope,
    g,
    u_lower,
    u_upper,
    mode: LpMode | str = LpMode.EXISTENTIAL,
) -> ControlLpResult:
    """Constant control for one region.

    Existential mode minimises the l1 distance from ``x_star`` to the set of
    envelope outputs reachable from some point of the region; robust mode
    minimises the worst such distance over the region's vertices.  Ties are
    broken by smallest l1 norm of ``u`` and then lexicographically.
    """
    mode = LpMode(mode)
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    g = np.atleast_2d(np.asarray(g, dtype=float))
    u_lower = np.asarray(u_lower, dtype=float).reshape(-1)
    u_upper = np.asarray(u_upper, dtype=float).reshape(-1)
    n, nc = g.shape
    if mode is LpMode.EXISTENTIAL:
        c, A, b, (th, yy, zp, zn, uu) = _existential_lp(x_star, region, envelope, g)
        bounds = [(0, None)] * n + [(None, None)] * n + [(0, None)] * (2 * n) + list(zip(u_lower, u_upper))
    else:
        c, A, b, uu = _robust_lp(x_star, region, envelope, g)
        bounds = [(0, None)] * (len(c) - nc) + list(zip(u_lower, u_upper))
    res = _linprog(c, A, b, bounds)
    opt = float(res.fun)

    # stage 2: smallest |u|_1 among optimal solutions (w >= |u|)
    nv = len(c)
    slack = 1e-9 * (1.0 + abs(opt))
    A2 = np.zeros((A.shape[0] + 1 + 2 * nc, nv + nc))
    A2[: A.shape[0], :nv] = A
    A2[A.shape[0], :nv] = c
    u_idx = np.arange(nv)[uu]
    for i in range(nc):
        A2[A.shape[0] + 1 + 2 * i, u_idx[i]] = 1.0
        A2[A.shape[0] + 1 + 2 * i, nv + i] = -1.0
        A2[A.shape[0] + 2 + 2 * i, u_idx[i]] = -1.0
        A2[A.shape[0] + 2 + 2 * i, nv + i] = -1.0
    b2 = np.concatenate([b, [opt + slack], np.zeros(2 * nc)])
    c2 = np.zeros(nv + nc)
    c2[nv:] = 1.0
    bounds2 = bounds + [(0, None)] * nc
    res2 = _linprog(c2, A2, b2, bounds2)
    sol = res2.x
    # stage 3: lexicographic tie-break on u
    l1 = float(res2.fun)
    A3 = np.vstack([A2, c2[None, :]])
    b3 = np.concatenate([b2, [l1 + slack]])
    bounds3 = list(bounds2)
    for i in range(nc):
        c3 = np.zeros(nv + nc)
        c3[u_idx[i]] = 1.0
        r3 = _linprog(c3, A3, b3, bounds3)
        sol = r3.x
        ui = float(r3.x[u_idx[i]])
        bounds3[u_idx[i]] = (ui, min(ui + slack, u_upper[i]))
    u = np.clip(sol[u_idx], u_lower, u_upper)
    objective = _lp_objective_value(x_star, region, envelope, g, u, mode, sol, opt)
    z = y = None
    if mode is LpMode.EXISTENTIAL:
        z = sol[zp] - sol[zn]
        y = sol[yy]
    return ControlLpResult(u, objective, z, y)


def _lp_objective_value(x_star, region, env, g, u, mode, sol, fallback) -> float:
    # recompute the objective at the returned u so it is exact for the clipped control
    if mode is LpMode.EXISTENTIAL:
        c, A, b, (th, yy, zp, zn, uu) = _existential_lp(x_star, region, env, g)
        n = region.dim
        bounds = [(0, None)] * n + [(None, None)] * n + [(0, None)] * (2 * n) + [(v, v) for v in u]
    else:
        c, A, b, uu = _robust_lp(x_star, region, env, g)
        bounds = [(0, None)] * (len(c) - len(u)) + [(v, v) for v in u]
    try:
        return float(_linprog(c, A, b, bounds).fun)
    except ControlLpError:
        return fallback


def lp_objective_at(x_star, env: LinearEnvelope, g, z, u) -> float:
    """``sum_i dist(x*_i, [lower_i(z) + (g u)_i, upper_i(z) + (g u)_i])``; the LP's value for fixed (z, u)."""
    z = np.atleast_2d(z)
    gu = np.atleast_2d(u) @ np.atleast_2d(g).T
    lo = z @ env.A_low.T + env.b_low + gu
    hi = z @ env.A_up.T + env.b_up + gu
    d = np.maximum(0.0, np.maximum(lo - x_star, x_star - hi))
    return d.sum(axis=1)


# --------------------------------------------------------------------------
# orchestration
# --------------------------------------------------------------------------


@dataclass
class IterationRecord:
    k: int
    eta_cap: float
    status: str
    eta: float = float("nan")
    threshold: float = float("nan")
    flagged: int = 0
    installed: int = 0
    P_s: float = 0.0
    lp_solves: int = 0


@dataclass
class ControllerResult:
    policy: ControlPolicy
    certificate: BarrierCertificate
    initial_certificate: BarrierCertificate
    iterations: int
    reached: bool
    history: list[IterationRecord]
    beta_before: dict[int, float]
    beta_after: dict[int, float]
    x_star: np.ndarray | None = None
    closed_loop_recertified: bool = False
    # region -> (beta without control, beta with control) under the barrier that selected it
    control_effect: dict[int, tuple[float, float]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def summary(self, partition: Partition) -> dict:
        return {
            "P_s_before": self.initial_certificate.P_s,
            "P_s_after": self.certificate.P_s,
            "controlled_fraction": controlled_fraction(self.policy, partition),
            "iterations": self.iterations,
            "reached_threshold": self.reached,
            "closed_loop_recertified": self.closed_loop_recertified,
        }

    def summary_json(self, partition: Partition) -> str:
        return json.dumps(self.summary(partition), indent=2)


def iteration_bound(threshold: float, eta_step: float) -> int:
    return math.ceil((1.0 - threshold) / eta_step - 1e-12) + 1


def synthesize_controller(
    spec: ProblemSpec,
    partition: Partition,
    envelopes: Sequence[LinearEnvelope],
    mode: BoundMode | str = BoundMode.LINEAR,
    backend: str = "auto",
    lp_mode: LpMode | str = LpMode.EXISTENTIAL,
    recertify: bool = True,
    seed: int = 0,
    threads: int = 1,
    convex: bool = False,
) -> ControllerResult:
    """Certificate-driven controller synthesis.

    Each iteration caps ``eta`` at ``1 - threshold - k * eta_step`` (so the cap
    shrinks and the per-region budget grows), minimises ``beta``, and installs
    an LP control on each over-budget region when that lowers the region's
    certified increase.  If no iteration reaches the threshold, the closed
    loop under each iteration's policy is certified afresh with ``eta`` free.
    """
    if spec.control is None:
        raise ProblemError("control structure required", "control")
    mode = BoundMode(mode)
    ctl = spec.control
    N, delta = spec.horizon, spec.threshold
    t0 = time.perf_counter()
    cert0 = synthesize(spec, partition, envelopes, mode, backend=backend, threads=threads, convex=convex)
    beta_before = dict(cert0.per_region_beta)
    result = ControllerResult(
        policy=ControlPolicy(ctl),
        certificate=cert0,
        initial_certificate=cert0,
        iterations=0,
        reached=cert0.P_s >= delta,
        history=[],
        beta_before=beta_before,
        beta_after=dict(beta_before),
    )
    if result.reached:
        result.timings["total"] = time.perf_counter() - t0
        return result

    bound = iteration_bound(delta, spec.eta_step)
    candidates: list[tuple[ControlPolicy, dict]] = []
    k = 0
    eta_cap = 1.0 - delta
    while k < bound and eta_cap >= 0.0:
        eta_cap = max(0.0, 1.0 - delta - k * spec.eta_step)
        rec = IterationRecord(k=k, eta_cap=eta_cap, status="ok")
        result.history.append(rec)
        k += 1
        try:
            cert = synthesize(
                spec, partition, envelopes, mode, eta_cap=eta_cap, backend=backend, threads=threads, convex=convex
            )
        except SynthesisError as e:
            rec.status = e.status
            log.info("iteration %d (eta cap %.4g): %s", k, eta_cap, e)
            if eta_cap <= 0.0:
                break
            continue
        thr = beta_threshold(delta, cert.eta, N)
        rec.eta, rec.threshold = cert.eta, thr
        policy = ControlPolicy(ctl)
        betas = dict(cert.per_region_beta)
        effect: dict[int, tuple[float, float]] = {}
        flagged = [q for q, b in betas.items() if b > thr + FLAG_SLACK]
        rec.flagged = len(flagged)
        if flagged:
            t_lp = time.perf_counter()
            bm = find_barrier_min(cert.B, spec.safe_set, seed=seed)
            result.x_star = bm.x_star
            for q in flagged:
                lp = synthesize_control_lp(bm.x_star, partition[q], envelopes[q], ctl.g, ctl.u_lower, ctl.u_upper, lp_mode)
                rec.lp_solves += 1
                if not np.any(lp.u):
                    continue
                new_beta = eval_beta_region(cert.B, partition[q], envelopes[q], spec.noise.variances, ctl.g @ lp.u, mode, backend)
                if new_beta < betas[q]:
                    policy.set(q, lp.u)
                    effect[q] = (betas[q], new_beta)
                    betas[q] = new_beta
            result.timings["control"] = result.timings.get("control", 0.0) + time.perf_counter() - t_lp
        rec.installed = len(policy)
        cert.per_region_beta = betas
        cert.recompute()
        rec.P_s = cert.P_s
        candidates.append((policy, effect))
        if cert.P_s > result.certificate.P_s or (cert.P_s >= delta and not result.reached):
            result.certificate, result.policy, result.beta_after = cert, policy, betas
            result.control_effect = effect
        if cert.P_s >= delta:
            result.reached = True
            break
        if eta_cap <= 0.0:
            break
    result.iterations = len(result.history)

    if not result.reached and recertify:
        seen = set()
        for policy, effect in reversed(candidates):
            key = tuple(sorted((q, tuple(u)) for q, u in policy.entries.items()))
            if not policy.entries or key in seen:
                continue
            seen.add(key)
            shifted = [env.shifted(ctl.g @ policy.u(q)) for q, env in enumerate(envelopes)]
            try:
                cert = synthesize(spec, partition, shifted, mode, backend=backend, threads=threads, convex=convex)
            except SynthesisError as e:
                log.info("closed-loop certification failed: %s", e)
                continue
            if cert.P_s > result.certificate.P_s:
                result.certificate, result.policy = cert, policy
                result.beta_after = dict(cert.per_region_beta)
                result.closed_loop_recertified = True
                result.control_effect = effect
            if cert.P_s >= delta:
                result.reached = True
                break
    result.timings["total"] = time.perf_counter() - t0
    return result


run_algorithm1 = synthesize_controller
