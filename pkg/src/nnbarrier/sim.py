"""Monte-Carlo simulation of the closed loop and empirical safety estimates.

Every trajectory draws its noise from its own Philox stream keyed by
``(seed, trajectory index)``, and Gaussians come from the Box-Muller
transform of that stream's uniforms.  Results therefore do not depend on the
number of worker threads or on the order in which trajectories run.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .control import ControlPolicy
from .geometry import Partition, contains_batch, partition_uniform
from .model import ProblemSpec

WILSON_Z99 = 2.5758293035489004


@dataclass
class SafetyEstimate:
    p_hat: float
    samples: int
    ci_half_width: float
    per_init_min: float
    ci_lower: float = 0.0
    ci_upper: float = 1.0
    per_init: list[float] | None = None
    init_points: list[list[float]] | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def wilson_interval(successes: int, trials: int, z: float = WILSON_Z99) -> tuple[float, float, float]:
    """Wilson score interval as ``(lower, upper, half_width)``, clamped to [0, 1]."""
    if trials <= 0:
        return 0.0, 1.0, 0.5
    p = successes / trials
    z2 = z * z
    denom = 1.0 + z2 / trials
    center = (p + z2 / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z2 / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half), half


def gaussian_stream(seed: int, index: int, count: int) -> np.ndarray:
    """``count`` standard normals for substream ``index`` via Box-Muller."""
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))
    half = (count + 1) // 2
    u1 = 1.0 - gen.random(half)  # (0, 1] keeps the log finite
    u2 = gen.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:count]


def _noise_block(spec: ProblemSpec, seed: int, first: int, count: int) -> np.ndarray:
    n, N = spec.dim, spec.horizon
    out = np.empty((count, N, n))
    for j in range(count):
        out[j] = gaussian_stream(seed, first + j, N * n).reshape(N, n)
    return out


def _run_batch(spec: ProblemSpec, X0: np.ndarray, noise: np.ndarray, policy, partition) -> tuple[np.ndarray, np.ndarray]:
    """Propagate a batch; returns states ``(batch, N+1, n)`` and per-step controls."""
    batch, N, n = noise.shape
    std = spec.noise.std
    c = spec.control.dim if spec.control is not None else 0
    states = np.empty((batch, N + 1, n))
    controls = np.zeros((batch, N, c))
    states[:, 0] = X0
    x = X0
    for k in range(N):
        nxt = spec.network.forward(x)
        if policy is not None and len(policy):
            u = policy.lookup(partition, x)
            controls[:, k] = u
            nxt = nxt + u @ spec.control.g.T
        x = nxt + std * noise[:, k]
        states[:, k + 1] = x
    return states, controls


def _safe_flags(spec: ProblemSpec, states: np.ndarray) -> np.ndarray:
    batch, steps, n = states.shape
    inside = contains_batch(spec.safe_set, states.reshape(-1, n)).reshape(batch, steps)
    return inside.all(axis=1)


def _default_partition(spec: ProblemSpec, partition: Partition | None) -> Partition:
    return partition if partition is not None else partition_uniform(spec.safe_set, spec.partition_widths)


def simulate(
    spec: ProblemSpec,
    x0,
    policy: ControlPolicy | None = None,
    partition: Partition | None = None,
    seed: int = 0,
    index: int = 0,
) -> tuple[np.ndarray, bool, np.ndarray]:
    """One trajectory of ``N + 1`` states from ``x0``.

    Returns the states, whether all of them lie in the safe set and the
    controls applied at each step.
    """
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    if policy is not None:
        partition = _default_partition(spec, partition)
    noise = _noise_block(spec, seed, index, 1)
    states, controls = _run_batch(spec, x0, noise, policy, partition)
    return states[0], bool(_safe_flags(spec, states)[0]), controls[0]


def init_grid_points(spec: ProblemSpec, per_axis: int = 3) -> np.ndarray:
    """``per_axis ** n`` points of the initial set including its corners."""
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(spec.initial_set.lower, spec.initial_set.upper)]
    return np.array(list(itertools.product(*axes)), dtype=float)


def estimate_safety(
    spec: ProblemSpec,
    policy: ControlPolicy | None = None,
    samples: int = 10_000,
    init_grid: int = 3,
    seed: int = 0,
    partition: Partition | None = None,
    threads: int = 1,
    chunk: int = 2048,
) -> SafetyEstimate:
    """Fraction of trajectories that stay safe for ``N`` steps.

    ``samples`` trajectories are split evenly over the initial-set grid; the
    worst grid point's rate is reported as ``per_init_min``.
    """
    if samples < 100:
        raise ValueError("need at least 100 samples")
    if policy is not None:
        partition = _default_partition(spec, partition)
    points = init_grid_points(spec, init_grid)
    per_point = max(1, samples // len(points))
    jobs = []
    for p_idx in range(len(points)):
        for start in range(0, per_point, chunk):
            jobs.append((p_idx, p_idx * per_point + start, min(chunk, per_point - start)))

    def run(job):
        p_idx, first, count = job
        noise = _noise_block(spec, seed, first, count)
        X0 = np.repeat(points[p_idx][None, :], count, axis=0)
        states, _ = _run_batch(spec, X0, noise, policy, partition)
        return p_idx, int(_safe_flags(spec, states).sum())

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    safe = np.zeros(len(points), dtype=np.int64)
    for p_idx, s in results:
        safe[p_idx] += s
    total = per_point * len(points)
    lo, hi, half = wilson_interval(int(safe.sum()), total)
    rates = safe / per_point
    return SafetyEstimate(
        p_hat=float(safe.sum() / total),
        samples=total,
        ci_half_width=half,
        per_init_min=float(rates.min()),
        ci_lower=lo,
        ci_upper=hi,
        per_init=rates.tolist(),
        init_points=points.tolist(),
        seed=seed,
    )


@dataclass
class SoundnessVerdict:
    passed: bool
    margin: float


def check_certificate_soundness(certified_p: float, estimate: SafetyEstimate) -> SoundnessVerdict:
    """A certified bound is plausible iff it does not exceed the worst empirical rate plus three half-widths."""
    margin = estimate.per_init_min + 3.0 * estimate.ci_half_width - float(certified_p)
    return SoundnessVerdict(margin >= 0.0, margin)


def trajectory_csv(states: np.ndarray, controls: np.ndarray, safe_set) -> str:
    """Rows ``k, x_1..x_n, u_1..u_c, safe_flag``; the flag is whether ``x_k`` is safe."""
    n = states.shape[1]
    c = controls.shape[1] if controls.ndim == 2 else 0
    flags = contains_batch(safe_set, states)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(c)] + ["safe_flag"])
    for k in range(states.shape[0]):
        u = controls[k] if k < controls.shape[0] else np.zeros(c)
        w.writerow([k] + [repr(float(v)) for v in states[k]] + [repr(float(v)) for v in u] + [int(flags[k])])
    return buf.getvalue()
