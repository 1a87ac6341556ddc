"""Boxes, semi-algebraic sets, uniform partitions and the unsafe complement."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .poly import ArityError, Polynomial

# Relative slack when counting grid cells, so widths quoted to a few decimals
# (e.g. 0.01745329 for pi/180) do not spawn a sliver cell at the upper face.
CELL_COUNT_RTOL = 1e-6


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Box:
    """Closed axis-aligned box ``{x : lower <= x <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(self.lower), _frozen(self.upper)
        if lo.shape != hi.shape:
            raise ArityError("lower and upper bounds differ in length")
        if lo.size == 0:
            raise ValueError("box must have at least one dimension")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError(f"empty box: lower {lo} exceeds upper {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains_box(self, other: "Box", tol: float = 0.0) -> bool:
        return bool(np.all(other.lower >= self.lower - tol) and np.all(other.upper <= self.upper + tol))

    def corners(self) -> np.ndarray:
        n = self.dim
        idx = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
        return np.where(idx == 1, self.upper[None, :], self.lower[None, :])

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.lower + rng.random((count, self.dim)) * self.widths

    def split(self, axis: int) -> tuple["Box", "Box"]:
        mid = self.center[axis]
        up1 = self.upper.copy()
        up1[axis] = mid
        lo2 = self.lower.copy()
        lo2[axis] = mid
        return Box(self.lower, up1), Box(lo2, self.upper)

    def __eq__(self, other) -> bool:
        return isinstance(other, Box) and np.array_equal(self.lower, other.lower) and np.array_equal(
            self.upper, other.upper
        )

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))

    def __repr__(self) -> str:
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True)
class SemiAlgebraicSet:
    """``{x : h_i(x) >= 0 for all i}`` for polynomial constraints ``h_i``."""

    constraints: tuple[Polynomial, ...]
    arity: int = field(default=-1)

    def __post_init__(self):
        cons = tuple(self.constraints)
        arity = self.arity
        if arity < 0:
            if not cons:
                raise ValueError("arity is required for an unconstrained set")
            arity = cons[0].arity
        for h in cons:
            if h.arity != arity:
                raise ArityError(f"constraint arity {h.arity} differs from set arity {arity}")
        object.__setattr__(self, "constraints", cons)
        object.__setattr__(self, "arity", arity)

    def __len__(self) -> int:
        return len(self.constraints)


def box_to_polynomials(box: Box) -> SemiAlgebraicSet:
    """Per-axis quadratic encoding ``(x_i - l_i)(u_i - x_i) >= 0``."""
    n = box.dim
    cons = []
    for i in range(n):
        l, u = float(box.lower[i]), float(box.upper[i])
        e2 = [0] * n
        e2[i] = 2
        e1 = [0] * n
        e1[i] = 1
        cons.append(Polynomial(n, {tuple(e2): -1.0, tuple(e1): l + u, (0,) * n: -l * u}))
    return SemiAlgebraicSet(tuple(cons), n)


def unsafe_decomposition(state_space: Box, safe: Box) -> list[SemiAlgebraicSet]:
    """Half-space slabs whose union is ``R^n`` minus the safe box.

    One slab per finite face of ``safe``: ``x_i - u_i >= 0`` and ``l_i - x_i >= 0``.
    """
    if state_space.dim != safe.dim:
        raise ArityError("state space and safe set differ in dimension")
    if not state_space.contains_box(safe):
        raise ValueError("safe set must lie inside the state space")
    n = safe.dim
    slabs = []
    for i in range(n):
        e1 = [0] * n
        e1[i] = 1
        zero = (0,) * n
        if np.isfinite(safe.upper[i]):
            slabs.append(SemiAlgebraicSet((Polynomial(n, {tuple(e1): 1.0, zero: -safe.upper[i]}),), n))
        if np.isfinite(safe.lower[i]):
            slabs.append(SemiAlgebraicSet((Polynomial(n, {tuple(e1): -1.0, zero: safe.lower[i]}),), n))
    return slabs


def contains(region, x, tol: float = 0.0) -> bool:
    """Closed membership test for a :class:`Box` or :class:`SemiAlgebraicSet`."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if isinstance(region, Box):
        if x.shape[0] != region.dim:
            raise ArityError(f"point has length {x.shape[0]}, box has dimension {region.dim}")
        return bool(np.all(x >= region.lower - tol) and np.all(x <= region.upper + tol))
    if isinstance(region, SemiAlgebraicSet):
        if x.shape[0] != region.arity:
            raise ArityError(f"point has length {x.shape[0]}, set arity is {region.arity}")
        return all(h.eval(x) >= -tol for h in region.constraints)
    raise TypeError(f"unsupported region type {type(region).__name__}")


def contains_batch(region, points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if isinstance(region, Box):
        return np.all((pts >= region.lower) & (pts <= region.upper), axis=1)
    mask = np.ones(pts.shape[0], dtype=bool)
    for h in region.constraints:
        mask &= h.eval_batch(pts) >= 0.0
    return mask


def cell_count(length: float, width: float) -> int:
    ratio = length / width
    if ratio <= 0:
        return 1
    return max(1, math.ceil(ratio - CELL_COUNT_RTOL * max(1.0, ratio)))


@dataclass(frozen=True, eq=False)
class Partition:
    """Uniform grid over ``source_box``; regions in row-major (lexicographic) order."""

    regions: tuple[Box, ...]
    widths: np.ndarray
    source_box: Box
    counts: tuple[int, ...]
    edges: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def __getitem__(self, i: int) -> Box:
        return self.regions[i]

    def locate(self, points) -> np.ndarray:
        """Region index for each point, using half-open cells ``[l, u)``.

        The global upper face is closed.  Points outside the source box map to -1.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = contains_batch(self.source_box, pts)
        idx = np.zeros(pts.shape[0], dtype=np.int64)
        for axis, (edges, count) in enumerate(zip(self.edges, self.counts)):
            # interior edges only; searchsorted 'right' gives half-open cells
            cell = np.searchsorted(edges[1:-1], pts[:, axis], side="right")
            cell = np.minimum(cell, count - 1)
            idx = idx * count + cell
        idx[~inside] = -1
        return idx

    def to_csv(self) -> str:
        n = self.source_box.dim
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["region_id"] + [f"l_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(n)])
        for rid, box in enumerate(self.regions):
            writer.writerow([rid] + [repr(float(v)) for v in box.lower] + [repr(float(v)) for v in box.upper])
        return buf.getvalue()


def partition_uniform(box: Box, widths: Sequence[float]) -> Partition:
    """Grid of cells of the given widths; the last cell per axis ends at the box face."""
    w = np.asarray(widths, dtype=float).reshape(-1)
    if w.shape[0] != box.dim:
        raise ArityError(f"{w.shape[0]} widths for a {box.dim}-dimensional box")
    if np.any(~(w > 0)):
        raise ValueError("partition widths must be strictly positive")
    if not np.all(np.isfinite(box.lower)) or not np.all(np.isfinite(box.upper)):
        raise ValueError("cannot partition an unbounded box")
    if np.any(box.widths <= 0):
        raise ValueError("cannot partition a box with zero extent")
    counts = tuple(cell_count(float(L), float(wi)) for L, wi in zip(box.widths, w))
    edges = []
    for lo, hi, wi, k in zip(box.lower, box.upper, w, counts):
        e = lo + wi * np.arange(k + 1, dtype=float)
        e[-1] = hi
        e.setflags(write=False)
        edges.append(e)
    regions = []
    for cell in np.ndindex(*counts):
        lo = [edges[a][c] for a, c in enumerate(cell)]
        hi = [edges[a][c + 1] for a, c in enumerate(cell)]
        regions.append(Box(lo, hi))
    return Partition(tuple(regions), _frozen(w), box, counts, tuple(edges))
