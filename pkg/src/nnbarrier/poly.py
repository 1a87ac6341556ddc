"""Sparse multivariate polynomials with float coefficients.

Terms are stored in a dict keyed by dense exponent tuples.  Arithmetic prunes
coefficients with magnitude below :data:`ZERO_TOL`.

The Gaussian expectation operator :func:`expect_shifted` maps a polynomial
``B(y)`` to ``E[B(y + v)]`` for ``v ~ N(0, diag(variances))``; the result is
again a polynomial in ``y`` because every moment of ``v`` is a constant.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels

ZERO_TOL = 1e-14
MAX_MOMENT_DEGREE = 32

Exponent = tuple[int, ...]


class ArityError(ValueError):
    """Raised when polynomials or points of different arity are combined."""


class Polynomial:
    """Immutable sparse polynomial in ``arity`` variables ``x1..xn``."""

    __slots__ = ("arity", "terms", "_hash")

    def __init__(self, arity: int, terms: Mapping[Exponent, float] | None = None):
        if arity < 0:
            raise ValueError("arity must be nonnegative")
        clean: dict[Exponent, float] = {}
        if terms:
            for exp, c in terms.items():
                exp = tuple(int(e) for e in exp)
                if len(exp) != arity:
                    raise ArityError(f"exponent {exp} does not have length {arity}")
                if any(e < 0 for e in exp):
                    raise ValueError(f"negative exponent in {exp}")
                c = float(c)
                if abs(c) >= ZERO_TOL:
                    clean[exp] = clean.get(exp, 0.0) + c
            clean = {e: c for e, c in clean.items() if abs(c) >= ZERO_TOL}
        object.__setattr__(self, "arity", arity)
        object.__setattr__(self, "terms", clean)
        object.__setattr__(self, "_hash", None)

    def __setattr__(self, name, value):
        raise AttributeError("Polynomial is immutable")

    # -- constructors -------------------------------------------------------
    @classmethod
    def zero(cls, arity: int) -> "Polynomial":
        return cls(arity)

    @classmethod
    def constant(cls, value: float, arity: int) -> "Polynomial":
        return cls(arity, {(0,) * arity: value})

    @classmethod
    def variable(cls, index: int, arity: int) -> "Polynomial":
        exp = [0] * arity
        exp[index] = 1
        return cls(arity, {tuple(exp): 1.0})

    @classmethod
    def monomial(cls, exp: Sequence[int], coef: float = 1.0) -> "Polynomial":
        return cls(len(exp), {tuple(exp): coef})

    @classmethod
    def _raw(cls, arity: int, terms: dict[Exponent, float]) -> "Polynomial":
        # trusted constructor for internal arithmetic
        p = object.__new__(cls)
        object.__setattr__(p, "arity", arity)
        object.__setattr__(p, "terms", {e: c for e, c in terms.items() if abs(c) >= ZERO_TOL})
        object.__setattr__(p, "_hash", None)
        return p

    # -- basic queries ------------------------------------------------------
    @property
    def degree(self) -> int:
        """Total degree; the zero polynomial has degree -1."""
        if not self.terms:
            return -1
        return max(sum(e) for e in self.terms)

    @property
    def is_zero(self) -> bool:
        return not self.terms

    def coefficient(self, exp: Sequence[int]) -> float:
        return self.terms.get(tuple(exp), 0.0)

    def __len__(self) -> int:
        return len(self.terms)

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float)):
            other = Polynomial.constant(other, self.arity)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.arity == other.arity and self.terms == other.terms

    def __hash__(self):
        if self._hash is None:
            object.__setattr__(self, "_hash", hash((self.arity, frozenset(self.terms.items()))))
        return self._hash

    def allclose(self, other: "Polynomial", rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        _check_arity(self, other)
        for exp in set(self.terms) | set(other.terms):
            a, b = self.terms.get(exp, 0.0), other.terms.get(exp, 0.0)
            if abs(a - b) > atol + rtol * max(abs(a), abs(b)):
                return False
        return True

    # -- arithmetic ---------------------------------------------------------
    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            _check_arity(self, other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(float(other), self.arity)
        raise TypeError(f"cannot combine Polynomial with {type(other).__name__}")

    def __add__(self, other) -> "Polynomial":
        other = self._coerce(other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out.get(e, 0.0) + c
        return Polynomial._raw(self.arity, out)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial._raw(self.arity, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Polynomial":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Polynomial":
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(float(other))
        other = self._coerce(other)
        out: dict[Exponent, float] = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, 0.0) + c1 * c2
        return Polynomial._raw(self.arity, out)

    __rmul__ = __mul__

    def scale(self, c: float) -> "Polynomial":
        return Polynomial._raw(self.arity, {e: c * v for e, v in self.terms.items()})

    def __pow__(self, k: int) -> "Polynomial":
        if not isinstance(k, int) or k < 0:
            raise ValueError("only nonnegative integer powers are supported")
        result = Polynomial.constant(1.0, self.arity)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    # -- evaluation -----------------------------------------------------------
    def __call__(self, x) -> float:
        return self.eval(x)

    def eval(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.arity:
            raise ArityError(f"point has length {x.shape[0]}, polynomial arity is {self.arity}")
        total = 0.0
        for exp, c in self.terms.items():
            m = c
            for xi, e in zip(x, exp):
                if e:
                    m *= xi**e
            total += m
        return float(total)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Exponent matrix (terms x arity) and coefficient vector, sorted."""
        items = sorted(self.terms.items())
        if not items:
            return np.zeros((0, self.arity), dtype=np.int64), np.zeros(0)
        exps = np.array([e for e, _ in items], dtype=np.int64).reshape(len(items), self.arity)
        coefs = np.array([c for _, c in items])
        return exps, coefs

    def eval_batch(self, points) -> np.ndarray:
        """Evaluate at each row of ``points`` (shape ``(P, arity)``)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.arity:
            raise ArityError(f"points have {pts.shape[1]} columns, polynomial arity is {self.arity}")
        exps, coefs = self.as_arrays()
        return _kernels.poly_eval_batch(exps, coefs, pts)

    # -- calculus and substitution ---------------------------------------------
    def derivative(self, i: int) -> "Polynomial":
        out: dict[Exponent, float] = {}
        for exp, c in self.terms.items():
            if exp[i]:
                e = list(exp)
                e[i] -= 1
                e = tuple(e)
                out[e] = out.get(e, 0.0) + c * exp[i]
        return Polynomial._raw(self.arity, out)

    def gradient(self) -> list["Polynomial"]:
        return [self.derivative(i) for i in range(self.arity)]

    def embed(self, arity: int, offset: int = 0) -> "Polynomial":
        """Reinterpret as a polynomial in ``arity`` variables, shifting indices.

        Equivalent to :func:`substitute_affine` with a coordinate-projection
        matrix, without the expansion cost.
        """
        if offset < 0 or offset + self.arity > arity:
            raise ArityError("embedding does not fit")
        pre = (0,) * offset
        post = (0,) * (arity - offset - self.arity)
        return Polynomial._raw(arity, {pre + e + post: c for e, c in self.terms.items()})

    def substitute_affine(self, M, c) -> "Polynomial":
        return substitute_affine(self, M, c)

    def __repr__(self) -> str:
        return f"Polynomial({self.arity}, {to_string(self)!r})"

    def __str__(self) -> str:
        return to_string(self)


def _check_arity(p: Polynomial, q: Polynomial) -> None:
    if p.arity != q.arity:
        raise ArityError(f"arity mismatch: {p.arity} vs {q.arity}")


def add(p: Polynomial, q: Polynomial) -> Polynomial:
    return p + q


def mul(p: Polynomial, q: Polynomial) -> Polynomial:
    return p * q


def scale(p: Polynomial, c: float) -> Polynomial:
    return p.scale(c)


def evaluate(p: Polynomial, x) -> float:
    return p.eval(x)


def gradient(p: Polynomial) -> list[Polynomial]:
    return p.gradient()


def substitute_affine(p: Polynomial, M, c) -> Polynomial:
    """Return ``p(M z + c)`` expanded as a polynomial in ``z``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    c = np.asarray(c, dtype=float).reshape(-1)
    if M.shape[0] != p.arity or c.shape[0] != p.arity:
        raise ArityError(f"substitution maps into {M.shape[0]} variables, polynomial arity is {p.arity}")
    new_arity = M.shape[1]
    lin = []
    for i in range(p.arity):
        terms = {(0,) * new_arity: c[i]}
        for j in range(new_arity):
            if M[i, j] != 0.0:
                e = [0] * new_arity
                e[j] = 1
                terms[tuple(e)] = M[i, j]
        lin.append(Polynomial(new_arity, terms))
    powers: list[dict[int, Polynomial]] = [{0: Polynomial.constant(1.0, new_arity)} for _ in range(p.arity)]

    def power(i: int, k: int) -> Polynomial:
        cache = powers[i]
        if k not in cache:
            cache[k] = power(i, k - 1) * lin[i]
        return cache[k]

    acc: dict[Exponent, float] = {}
    for exp, coef in p.terms.items():
        term = Polynomial.constant(coef, new_arity)
        for i, e in enumerate(exp):
            if e:
                term = term * power(i, e)
        for e2, v in term.terms.items():
            acc[e2] = acc.get(e2, 0.0) + v
    return Polynomial._raw(new_arity, acc)


# --------------------------------------------------------------------------
# Gaussian moments and the expectation operator
# --------------------------------------------------------------------------


def double_factorial(k: int) -> int:
    if k < -1:
        raise ValueError("double factorial undefined below -1")
    if k > MAX_MOMENT_DEGREE:
        raise OverflowError(f"double factorial only supported up to {MAX_MOMENT_DEGREE}")
    out = 1
    while k > 1:
        out *= k
        k -= 2
    return out


def gaussian_moment(d: int, variance: float) -> float:
    """Central moment ``E[v^d]`` for ``v ~ N(0, variance)``."""
    if d < 0:
        raise ValueError("moment order must be nonnegative")
    if d > MAX_MOMENT_DEGREE:
        raise OverflowError(f"moments above degree {MAX_MOMENT_DEGREE} are not supported")
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    if d == 0:
        return 1.0
    if d % 2:
        return 0.0
    return variance ** (d // 2) * double_factorial(d - 1)


@dataclass(frozen=True)
class MomentTable:
    """``moments[i][d] = E[v_i^d]`` for d = 0..max_degree."""

    moments: tuple[tuple[float, ...], ...]

    @classmethod
    def from_variances(cls, variances: Sequence[float], max_degree: int) -> "MomentTable":
        return cls(
            tuple(tuple(gaussian_moment(d, float(s2)) for d in range(max_degree + 1)) for s2 in variances)
        )

    def __getitem__(self, i: int) -> tuple[float, ...]:
        return self.moments[i]


@lru_cache(maxsize=4096)
def _shifted_monomial(exp: Exponent, variances: tuple[float, ...]) -> tuple[tuple[Exponent, float], ...]:
    # E[prod_i (y_i + v_i)^{d_i}] = prod_i sum_k C(d_i, k) y_i^{d_i - k} E[v_i^k]
    factors = []
    for d, s2 in zip(exp, variances):
        factors.append(
            [(d - k, math.comb(d, k) * gaussian_moment(k, s2)) for k in range(0, d + 1, 2)]
        )
    out: dict[Exponent, float] = {(): 1.0}
    for fac in factors:
        nxt: dict[Exponent, float] = {}
        for e, c in out.items():
            for power, w in fac:
                if w == 0.0:
                    continue
                key = e + (power,)
                nxt[key] = nxt.get(key, 0.0) + c * w
        out = nxt
    return tuple(out.items())


def expect_shifted(B: Polynomial, variances) -> Polynomial:
    """Return ``E[B(y + v)]`` as a polynomial in ``y``.

    ``variances`` is the diagonal of the noise covariance.  A full covariance
    matrix is accepted only if it is diagonal.
    """
    var = np.asarray(variances, dtype=float)
    if var.ndim == 2:
        if var.shape != (B.arity, B.arity):
            raise ArityError("covariance shape does not match polynomial arity")
        if np.any(var - np.diag(np.diag(var))):
            raise NotImplementedError("only diagonal noise covariance is supported")
        var = np.diag(var)
    var = var.reshape(-1)
    if var.shape[0] != B.arity:
        raise ArityError(f"{var.shape[0]} variances for arity-{B.arity} polynomial")
    if np.any(var < 0) or not np.all(np.isfinite(var)):
        raise ValueError("variances must be finite and nonnegative")
    key = tuple(float(s) for s in var)
    acc: dict[Exponent, float] = {}
    for exp, c in B.terms.items():
        for e, w in _shifted_monomial(exp, key):
            acc[e] = acc.get(e, 0.0) + c * w
    return Polynomial._raw(B.arity, acc)


# --------------------------------------------------------------------------
# monomial bases
# --------------------------------------------------------------------------


def monomials_up_to(arity: int, degree: int) -> list[Exponent]:
    """All exponent vectors of total degree <= ``degree`` in graded-lex order."""
    out: list[Exponent] = []
    for d in range(degree + 1):
        block = []
        for combo in combinations_with_replacement(range(arity), d):
            e = [0] * arity
            for i in combo:
                e[i] += 1
            block.append(tuple(e))
        # lex order within a degree: larger exponent on x1 first
        block.sort(reverse=True)
        out.extend(block)
    return out


# --------------------------------------------------------------------------
# text form
# --------------------------------------------------------------------------


def _grlex_key(exp: Exponent):
    return (-sum(exp), tuple(-e for e in exp))


def to_string(p: Polynomial) -> str:
    """Sorted-term text such as ``1.0*x1^2*x2 - 0.5``; ``0`` for the zero polynomial."""
    if not p.terms:
        return "0"
    parts = []
    for exp in sorted(p.terms, key=_grlex_key):
        c = p.terms[exp]
        mono = "*".join(
            f"x{i + 1}" if e == 1 else f"x{i + 1}^{e}" for i, e in enumerate(exp) if e
        )
        body = repr(abs(c)) + (f"*{mono}" if mono else "")
        if not parts:
            parts.append(body if c >= 0 else f"-{body}")
        else:
            parts.append(("+ " if c >= 0 else "- ") + body)
    return " ".join(parts)


_TERM_RE = re.compile(
    r"\s*([+-])?\s*"
    r"((?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|inf|nan)?"
    r"((?:\s*\*?\s*x\d+(?:\s*\^\s*\d+)?)*)\s*"
)
_FACTOR_RE = re.compile(r"x(\d+)(?:\s*\^\s*(\d+))?")


def from_string(text: str, arity: int) -> Polynomial:
    """Parse the text form produced by :func:`to_string`."""
    text = text.strip()
    if text == "0":
        return Polynomial.zero(arity)
    pos = 0
    acc: dict[Exponent, float] = {}
    while pos < len(text):
        m = _TERM_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise ValueError(f"cannot parse polynomial near {text[pos:pos + 20]!r}")
        sign, coef, factors = m.groups()
        if coef is None and not factors.strip():
            raise ValueError(f"empty term near {text[pos:pos + 20]!r}")
        c = float(coef) if coef is not None else 1.0
        if sign == "-":
            c = -c
        exp = [0] * arity
        for var, power in _FACTOR_RE.findall(factors):
            idx = int(var) - 1
            if not 0 <= idx < arity:
                raise ArityError(f"variable x{var} out of range for arity {arity}")
            exp[idx] += int(power) if power else 1
        key = tuple(exp)
        acc[key] = acc.get(key, 0.0) + c
        pos = m.end()
    return Polynomial(arity, acc)


def random_polynomial(
    rng: np.random.Generator, arity: int, degree: int, density: float = 1.0, scale: float = 1.0
) -> Polynomial:
    """Random polynomial with standard-normal coefficients on a random subset of monomials."""
    terms = {}
    for exp in monomials_up_to(arity, degree):
        if rng.random() <= density:
            terms[exp] = scale * rng.standard_normal()
    return Polynomial(arity, terms)


def sum_polys(polys: Iterable[Polynomial], arity: int) -> Polynomial:
    acc: dict[Exponent, float] = {}
    for p in polys:
        for e, c in p.terms.items():
            acc[e] = acc.get(e, 0.0) + c
    return Polynomial._raw(arity, acc)
