"""Sound per-region bounds on a relu network: interval and affine envelopes."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import Box, Partition
from .model import Activation, NeuralNetwork
from .poly import ArityError


class BoundMode(str, Enum):
    INTERVAL = "interval"
    LINEAR = "linear"


@dataclass(frozen=True, eq=False)
class IntervalEnvelope:
    lo: np.ndarray
    hi: np.ndarray
    region: Box

    def __post_init__(self):
        if np.any(self.lo > self.hi + 1e-12):
            raise ValueError("interval envelope with lo > hi")


@dataclass(frozen=True, eq=False)
class LinearEnvelope:
    """Affine sandwich ``A_low x + b_low <= f(x) <= A_up x + b_up`` on ``region``.

    ``ibp_lo``/``ibp_hi`` carry the constant interval bounds computed for the
    same region so that callers can use both descriptions at once.
    """

    A_low: np.ndarray
    b_low: np.ndarray
    A_up: np.ndarray
    b_up: np.ndarray
    region: Box
    ibp_lo: np.ndarray | None = None
    ibp_hi: np.ndarray | None = None

    @property
    def dim_out(self) -> int:
        return self.b_low.shape[0]

    def lower(self, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(X) @ self.A_low.T + self.b_low

    def upper(self, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(X) @ self.A_up.T + self.b_up

    def shifted(self, shift) -> "LinearEnvelope":
        """Envelope of ``x -> f(x) + shift`` (used for a constant control input)."""
        s = np.asarray(shift, dtype=float).reshape(-1)
        return LinearEnvelope(
            self.A_low,
            self.b_low + s,
            self.A_up,
            self.b_up + s,
            self.region,
            None if self.ibp_lo is None else self.ibp_lo + s,
            None if self.ibp_hi is None else self.ibp_hi + s,
        )

    def constant_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Tightest known constant bounds over the region."""
        ext = envelope_extremes(self)
        lo, hi = ext.lo, ext.hi
        if self.ibp_lo is not None:
            lo = np.maximum(lo, self.ibp_lo)
            hi = np.minimum(hi, self.ibp_hi)
        return lo, hi

    @property
    def is_constant(self) -> bool:
        return not (np.any(self.A_low) or np.any(self.A_up))


def _check(net: NeuralNetwork, region: Box) -> None:
    if region.dim != net.dim_in:
        raise ArityError(f"region has dimension {region.dim}, network expects {net.dim_in}")


def _affine_interval(W, b, lo, hi):
    Wp = np.maximum(W, 0.0)
    Wn = np.minimum(W, 0.0)
    return Wp @ lo + Wn @ hi + b, Wp @ hi + Wn @ lo + b


def preactivation_bounds(net: NeuralNetwork, region: Box) -> list[tuple[np.ndarray, np.ndarray]]:
    """Interval bounds on each layer's pre-activation vector."""
    _check(net, region)
    lo, hi = region.lower.copy(), region.upper.copy()
    out = []
    for layer in net.layers:
        zl, zu = _affine_interval(layer.weight, layer.bias, lo, hi)
        out.append((zl, zu))
        if layer.activation is Activation.RELU:
            lo, hi = np.maximum(zl, 0.0), np.maximum(zu, 0.0)
        else:
            lo, hi = zl, zu
    return out


def ibp(net: NeuralNetwork, region: Box) -> IntervalEnvelope:
    pre = preactivation_bounds(net, region)
    zl, zu = pre[-1]
    if net.layers[-1].activation is Activation.RELU:
        zl, zu = np.maximum(zl, 0.0), np.maximum(zu, 0.0)
    return IntervalEnvelope(zl, zu, region)


def relu_relaxation(l: np.ndarray, u: np.ndarray):
    """Per-neuron linear bounds ``a_low z + c_low <= relu(z) <= a_up z + c_up`` on ``[l, u]``."""
    a_low = np.zeros_like(l)
    a_up = np.zeros_like(l)
    c_up = np.zeros_like(l)
    active = l >= 0
    a_low[active] = 1.0
    a_up[active] = 1.0
    unstable = (l < 0) & (u > 0)
    lu, uu = l[unstable], u[unstable]
    a_up[unstable] = uu / (uu - lu)
    c_up[unstable] = -lu * uu / (uu - lu)
    a_low[unstable] = np.where(uu >= -lu, 1.0, 0.0)
    return a_low, np.zeros_like(l), a_up, c_up


def _backward(net: NeuralNetwork, pre, upper: bool) -> tuple[np.ndarray, np.ndarray]:
    layers = net.layers
    Lam = np.eye(net.dim_out)
    off = np.zeros(net.dim_out)
    for k in range(len(layers) - 1, -1, -1):
        layer = layers[k]
        if layer.activation is Activation.RELU:
            a_low, c_low, a_up, c_up = relu_relaxation(*pre[k])
            Lp, Ln = np.maximum(Lam, 0.0), np.minimum(Lam, 0.0)
            if upper:
                off = off + Lp @ c_up + Ln @ c_low
                Lam = Lp * a_up + Ln * a_low
            else:
                off = off + Lp @ c_low + Ln @ c_up
                Lam = Lp * a_low + Ln * a_up
        off = off + Lam @ layer.bias
        Lam = Lam @ layer.weight
    return Lam, off


def crown(net: NeuralNetwork, region: Box) -> LinearEnvelope:
    """Backward linear relaxation using interval pre-activation bounds."""
    pre = preactivation_bounds(net, region)
    A_up, b_up = _backward(net, pre, upper=True)
    A_low, b_low = _backward(net, pre, upper=False)
    return LinearEnvelope(A_low, b_low, A_up, b_up, region)


def _affine_range(A, b, box: Box):
    Ap, An = np.maximum(A, 0.0), np.minimum(A, 0.0)
    return Ap @ box.lower + An @ box.upper + b, Ap @ box.upper + An @ box.lower + b


def envelope_extremes(env: LinearEnvelope) -> IntervalEnvelope:
    lo, _ = _affine_range(env.A_low, env.b_low, env.region)
    _, hi = _affine_range(env.A_up, env.b_up, env.region)
    return IntervalEnvelope(lo, hi, env.region)


def bound_region(net: NeuralNetwork, region: Box, mode: BoundMode | str = BoundMode.LINEAR) -> LinearEnvelope:
    """Envelope for one region.

    Interval mode returns a constant envelope.  Linear mode returns the
    backward relaxation with each output row replaced by the constant interval
    bound whenever that is tighter over the region, so its extremes never
    exceed the interval ones.
    """
    mode = BoundMode(mode)
    box = ibp(net, region)
    n_out, n_in = net.dim_out, net.dim_in
    if mode is BoundMode.INTERVAL:
        Z = np.zeros((n_out, n_in))
        return LinearEnvelope(Z, box.lo.copy(), Z.copy(), box.hi.copy(), region, box.lo, box.hi)
    env = crown(net, region)
    ext = envelope_extremes(env)
    A_low, b_low = env.A_low.copy(), env.b_low.copy()
    A_up, b_up = env.A_up.copy(), env.b_up.copy()
    for i in range(n_out):
        if ext.lo[i] < box.lo[i]:
            A_low[i] = 0.0
            b_low[i] = box.lo[i]
        if ext.hi[i] > box.hi[i]:
            A_up[i] = 0.0
            b_up[i] = box.hi[i]
    return LinearEnvelope(A_low, b_low, A_up, b_up, region, box.lo, box.hi)


def bound_partition(
    net: NeuralNetwork, partition: Partition, mode: BoundMode | str, threads: int = 1
) -> list[LinearEnvelope]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda q: bound_region(net, q, mode), partition.regions))
    return [bound_region(net, q, mode) for q in partition.regions]


def count_violations(net: NeuralNetwork, env: LinearEnvelope, samples: np.ndarray, slack: float = 1e-9) -> int:
    """Number of sample points where the envelope fails to sandwich the network."""
    F = net.forward(samples)
    bad = (env.lower(samples) > F + slack) | (F > env.upper(samples) + slack)
    return int(np.count_nonzero(np.any(bad, axis=1)))


def envelopes_to_csv(envelopes: list[LinearEnvelope], mode: BoundMode | str) -> str:
    mode = BoundMode(mode).value
    if not envelopes:
        return ""
    n_out, n_in = envelopes[0].A_low.shape
    header = ["region_id", "mode"]
    header += [f"A_low_{i + 1}_{j + 1}" for i in range(n_out) for j in range(n_in)]
    header += [f"b_low_{i + 1}" for i in range(n_out)]
    header += [f"A_up_{i + 1}_{j + 1}" for i in range(n_out) for j in range(n_in)]
    header += [f"b_up_{i + 1}" for i in range(n_out)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for rid, env in enumerate(envelopes):
        vals = np.concatenate([env.A_low.reshape(-1), env.b_low, env.A_up.reshape(-1), env.b_up])
        w.writerow([rid, mode] + [repr(float(v)) for v in vals])
    return buf.getvalue()
