"""Sum-of-squares programs and their compilation to conic standard form.

A program owns scalar decision variables (with optional box bounds) and
Gram-parametrised SOS polynomials ``z(x)^T Q z(x)`` with ``Q`` PSD over the
full monomial basis ``z`` of degree ``<= degree/2``.  Expressions are affine
in the decision variables with polynomial coefficients; ``assert_sos``
introduces a fresh Gram matrix and the coefficient-matching equalities.

Gram matrices are vectorised as the upper triangle stored column by column,
off-diagonal entries scaled by sqrt(2) so that the Euclidean inner product of
two vectors equals the trace inner product of the matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from ..geometry import SemiAlgebraicSet
from ..poly import ArityError, Exponent, Polynomial, monomials_up_to

SQRT2 = math.sqrt(2.0)

# column keys: ("s", scalar_index) or ("g", gram_id, svec_index)
Key = tuple


class SosError(ValueError):
    pass


def svec_index(i: int, j: int) -> int:
    if i > j:
        i, j = j, i
    return j * (j + 1) // 2 + i


def svec_len(k: int) -> int:
    return k * (k + 1) // 2


def smat(v: np.ndarray, k: int) -> np.ndarray:
    """Symmetric matrix from its scaled upper-triangular vector."""
    M = np.zeros((k, k))
    iu = np.triu_indices(k)
    # column-major upper triangle: order by (j, i)
    order = np.lexsort((iu[0], iu[1]))
    rows, cols = iu[0][order], iu[1][order]
    vals = np.asarray(v, dtype=float).copy()
    off = rows != cols
    vals[off] /= SQRT2
    M[rows, cols] = vals
    M[cols, rows] = vals
    return M


def svec(M: np.ndarray) -> np.ndarray:
    k = M.shape[0]
    out = np.empty(svec_len(k))
    for j in range(k):
        for i in range(j + 1):
            out[svec_index(i, j)] = M[i, j] * (1.0 if i == j else SQRT2)
    return out


def _add_into(acc: dict, key, poly: Polynomial, sign: float = 1.0) -> None:
    cur = acc.get(key)
    term = poly if sign == 1.0 else poly.scale(sign)
    acc[key] = term if cur is None else cur + term
    if acc[key].is_zero:
        del acc[key]


class SosExpr:
    """Polynomial expression affine in the program's decision variables."""

    __slots__ = ("arity", "const", "coeffs")

    def __init__(self, arity: int, const: Polynomial | None = None, coeffs: Mapping[Key, Polynomial] | None = None):
        self.arity = arity
        self.const = const if const is not None else Polynomial.zero(arity)
        if self.const.arity != arity:
            raise ArityError("constant part has the wrong arity")
        self.coeffs: dict[Key, Polynomial] = dict(coeffs or {})

    @classmethod
    def of(cls, value, arity: int) -> "SosExpr":
        if isinstance(value, SosExpr):
            return value
        if isinstance(value, Polynomial):
            return cls(value.arity, value)
        if isinstance(value, Scalar):
            return cls(arity, None, {value.key: Polynomial.constant(1.0, arity)})
        if isinstance(value, (int, float, np.floating, np.integer)):
            return cls(arity, Polynomial.constant(float(value), arity))
        raise TypeError(f"cannot convert {type(value).__name__} to an SOS expression")

    def _combine(self, other, sign: float) -> "SosExpr":
        other = SosExpr.of(other, self.arity)
        if other.arity != self.arity:
            raise ArityError(f"arity {other.arity} does not match {self.arity}")
        coeffs = dict(self.coeffs)
        for k, p in other.coeffs.items():
            _add_into(coeffs, k, p, sign)
        const = self.const + other.const if sign > 0 else self.const - other.const
        return SosExpr(self.arity, const, coeffs)

    def __add__(self, other) -> "SosExpr":
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other) -> "SosExpr":
        return self._combine(other, -1.0)

    def __rsub__(self, other) -> "SosExpr":
        return SosExpr.of(other, self.arity)._combine(self, -1.0)

    def __neg__(self) -> "SosExpr":
        return SosExpr(self.arity, -self.const, {k: -p for k, p in self.coeffs.items()})

    def __mul__(self, other) -> "SosExpr":
        if isinstance(other, Polynomial):
            if other.arity != self.arity:
                raise ArityError("polynomial factor has the wrong arity")
            coeffs = {}
            for k, p in self.coeffs.items():
                q = p * other
                if not q.is_zero:
                    coeffs[k] = q
            return SosExpr(self.arity, self.const * other, coeffs)
        c = float(other)
        return SosExpr(self.arity, self.const.scale(c), {k: p.scale(c) for k, p in self.coeffs.items() if c != 0.0})

    __rmul__ = __mul__

    def map_polys(self, fn) -> "SosExpr":
        """Apply a linear map on polynomials to every coefficient (e.g. an embedding)."""
        const = fn(self.const)
        coeffs = {}
        for k, p in self.coeffs.items():
            q = fn(p)
            if not q.is_zero:
                coeffs[k] = q
        return SosExpr(const.arity, const, coeffs)

    @property
    def degree(self) -> int:
        return max([self.const.degree] + [p.degree for p in self.coeffs.values()])

    def keys(self) -> list[Key]:
        return sorted(self.coeffs)

    def __repr__(self) -> str:
        return f"SosExpr(arity={self.arity}, degree={self.degree}, vars={len(self.coeffs)})"


@dataclass(frozen=True)
class Scalar:
    index: int
    name: str

    @property
    def key(self) -> Key:
        return ("s", self.index)


@dataclass(frozen=True, eq=False)
class SosVar:
    """Gram-parametrised SOS polynomial ``z(x)^T Q z(x)``."""

    id: int
    arity: int
    degree: int
    basis: tuple[Exponent, ...]
    label: str = ""

    @property
    def gram_dim(self) -> int:
        return len(self.basis)

    def expr(self) -> SosExpr:
        coeffs = {}
        k = self.gram_dim
        for b in range(k):
            for a in range(b + 1):
                exp = tuple(x + y for x, y in zip(self.basis[a], self.basis[b]))
                w = 1.0 if a == b else SQRT2
                coeffs[("g", self.id, svec_index(a, b))] = Polynomial.monomial(exp, w)
        return SosExpr(self.arity, None, coeffs)


@dataclass
class Constraint:
    name: str
    expr: SosExpr
    gram: SosVar
    monomials: tuple[Exponent, ...]


@dataclass
class ConicProblem:
    """``min c^T x  s.t.  A x = b,  lb <= x[:n_scalars] <= ub,  Gram blocks PSD``.

    ``x`` is the scalars followed by the scaled upper-triangular vector of each
    Gram block in registration order.
    """

    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    n_scalars: int
    block_dims: tuple[int, ...]
    row_names: list[str] = field(default_factory=list)

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    @property
    def block_offsets(self) -> list[int]:
        offs = []
        pos = self.n_scalars
        for k in self.block_dims:
            offs.append(pos)
            pos += svec_len(k)
        return offs

    def to_text(self) -> str:
        """Sparse text dump: a header with the dimensions, then triplets."""
        A = self.A.tocoo()
        lines = [
            "conic-sparse 1",
            f"dims vars={self.n_vars} rows={self.A.shape[0]} scalars={self.n_scalars} blocks={len(self.block_dims)}",
            "blocks " + " ".join(str(k) for k in self.block_dims),
        ]
        for i in np.flatnonzero(self.c):
            lines.append(f"c {i} {self.c[i]!r}")
        order = np.lexsort((A.col, A.row))
        for r, cidx, v in zip(A.row[order], A.col[order], A.data[order]):
            lines.append(f"A {r} {cidx} {float(v)!r}")
        for i in np.flatnonzero(self.b):
            lines.append(f"b {i} {self.b[i]!r}")
        for i in range(self.n_scalars):
            lines.append(f"bound {i} {float(self.lb[i])!r} {float(self.ub[i])!r}")
        return "\n".join(lines) + "\n"


class SosProgram:
    def __init__(self, name: str = ""):
        self.name = name
        self.scalars: list[Scalar] = []
        self.lower: list[float] = []
        self.upper: list[float] = []
        self.grams: list[SosVar] = []
        self.constraints: list[Constraint] = []
        self.objective: dict[int, float] = {}

    # --- variables -------------------------------------------------------

    def new_scalar(self, name: str, lower: float = -np.inf, upper: float = np.inf) -> Scalar:
        if lower > upper:
            raise SosError(f"scalar {name}: lower bound exceeds upper bound")
        s = Scalar(len(self.scalars), name)
        self.scalars.append(s)
        self.lower.append(float(lower))
        self.upper.append(float(upper))
        return s

    def new_sos_var(self, arity: int, degree: int, label: str = "") -> SosVar:
        if degree < 0 or degree % 2:
            raise SosError(f"SOS variables need an even nonnegative degree, got {degree}")
        basis = tuple(monomials_up_to(arity, degree // 2))
        v = SosVar(len(self.grams), arity, degree, basis, label)
        self.grams.append(v)
        return v

    # --- constraints -------------------------------------------------------

    def assert_sos(self, expr: SosExpr, name: str = "", degree: int | None = None) -> SosVar:
        """Require ``expr`` to be a sum of squares; returns its certificate Gram variable."""
        d = max(expr.degree, 0)
        cert_deg = d + (d % 2)
        if degree is not None:
            if degree % 2:
                raise SosError("certificate degree must be even")
            if degree < d:
                bad = self._first_monomial_above(expr, degree)
                raise SosError(
                    f"constraint {name or len(self.constraints)}: monomial {bad} exceeds certificate degree {degree}"
                )
            cert_deg = degree
        gram = self.new_sos_var(expr.arity, cert_deg, label=f"cert:{name}")
        monos = tuple(monomials_up_to(expr.arity, cert_deg))
        self.constraints.append(Constraint(name or f"c{len(self.constraints)}", expr, gram, monos))
        return gram

    @staticmethod
    def _first_monomial_above(expr: SosExpr, degree: int):
        for p in [expr.const, *expr.coeffs.values()]:
            for e in sorted(p.terms):
                if sum(e) > degree:
                    return e
        return None

    def putinar_block(
        self,
        gamma,
        region: SemiAlgebraicSet,
        multiplier_degree: int | None = None,
        target_degree: int | None = None,
        label: str = "",
    ) -> tuple[SosExpr, list[SosVar]]:
        """``gamma - sum_i lambda_i h_i`` with fresh SOS multipliers ``lambda_i``.

        Asserting the result SOS certifies ``gamma >= 0`` on the set.  The
        default multiplier degree is the largest even number not exceeding
        ``target_degree - deg(h_i)``, where the target defaults to the degree of
        ``gamma`` rounded up to even.
        """
        expr = SosExpr.of(gamma, region.arity)
        if target_degree is None:
            d = max(expr.degree, 0)
            target_degree = d + (d % 2)
        mults = []
        for i, h in enumerate(region.constraints):
            if multiplier_degree is None:
                md = target_degree - h.degree
                md -= md % 2
            else:
                md = multiplier_degree
            if md < 0:
                continue
            lam = self.new_sos_var(region.arity, md, label=f"{label}mult{i}")
            mults.append(lam)
            expr = expr - lam.expr() * h
        return expr, mults

    def minimize(self, terms: Mapping[Scalar, float]) -> None:
        self.objective = {s.index: float(c) for s, c in terms.items()}

    # --- compilation -------------------------------------------------------

    def column_offsets(self) -> tuple[int, list[int]]:
        n_s = len(self.scalars)
        offs = []
        pos = n_s
        for g in self.grams:
            offs.append(pos)
            pos += svec_len(g.gram_dim)
        return pos, offs

    def column_of(self, key: Key, offsets: list[int]) -> int:
        if key[0] == "s":
            return key[1]
        return offsets[key[1]] + key[2]

    def compile(self) -> ConicProblem:
        n_vars, offs = self.column_offsets()
        rows, cols, vals = [], [], []
        b = []
        names = []
        r = 0
        for con in self.constraints:
            index = {m: i for i, m in enumerate(con.monomials)}
            base = r
            for key in con.expr.keys():
                col = self.column_of(key, offs)
                for exp, cval in sorted(con.expr.coeffs[key].terms.items()):
                    rows.append(base + index[exp])
                    cols.append(col)
                    vals.append(cval)
            gexpr = con.gram.expr()
            for key in gexpr.keys():
                col = self.column_of(key, offs)
                for exp, cval in gexpr.coeffs[key].terms.items():
                    rows.append(base + index[exp])
                    cols.append(col)
                    vals.append(-cval)
            rhs = np.zeros(len(con.monomials))
            for exp, cval in con.expr.const.terms.items():
                if exp not in index:
                    raise SosError(f"constraint {con.name}: monomial {exp} outside certificate basis")
                rhs[index[exp]] = -cval
            b.append(rhs)
            names.extend(f"{con.name}:{m}" for m in con.monomials)
            r += len(con.monomials)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(r, n_vars))
        A.sum_duplicates()
        A.sort_indices()
        c = np.zeros(n_vars)
        for i, v in self.objective.items():
            c[i] = v
        return ConicProblem(
            c=c,
            A=A,
            b=np.concatenate(b) if b else np.zeros(0),
            lb=np.array(self.lower, dtype=float),
            ub=np.array(self.upper, dtype=float),
            n_scalars=len(self.scalars),
            block_dims=tuple(g.gram_dim for g in self.grams),
            row_names=names,
        )

    def solve(self, backend: str = "auto", **options):
        from .solve import solve_program

        return solve_program(self, backend=backend, **options)


def expr_value(expr: SosExpr, x: np.ndarray, offsets: list[int]) -> Polynomial:
    """Polynomial obtained by substituting the solution vector ``x`` into ``expr``."""
    out = expr.const
    acc: dict[Exponent, float] = dict(out.terms)
    for key, p in expr.coeffs.items():
        v = float(x[key[1]] if key[0] == "s" else x[offsets[key[1]] + key[2]])
        if v == 0.0:
            continue
        for e, c in p.terms.items():
            acc[e] = acc.get(e, 0.0) + v * c
    return Polynomial(expr.arity, acc)


def gram_polynomial(var: SosVar, Q: np.ndarray) -> Polynomial:
    acc: dict[Exponent, float] = {}
    k = var.gram_dim
    for a in range(k):
        for bb in range(k):
            if Q[a, bb] == 0.0:
                continue
            exp = tuple(x + y for x, y in zip(var.basis[a], var.basis[bb]))
            acc[exp] = acc.get(exp, 0.0) + Q[a, bb]
    return Polynomial(var.arity, acc)


def sum_exprs(exprs: Iterable[SosExpr], arity: int) -> SosExpr:
    out = SosExpr(arity)
    for e in exprs:
        out = out + e
    return out
