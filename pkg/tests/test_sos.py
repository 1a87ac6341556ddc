import numpy as np
import pytest

from conftest import BACKENDS
from nnbarrier.geometry import Box, SemiAlgebraicSet, box_to_polynomials
from nnbarrier.poly import Polynomial, from_string
from nnbarrier.sos import (
    INFEASIBLE,
    NUMERICAL_FAILURE,
    OPTIMAL,
    SosError,
    SosExpr,
    SosProgram,
    check_certificate,
    gram_polynomial,
    resolve_backend,
    smat,
    svec,
    svec_index,
    svec_len,
)
from nnbarrier.sos.ipm import solve_lp_sdp
from nnbarrier.sos.solve import validate


def P(text, arity=1):
    return from_string(text, arity)


def certify(p: Polynomial, backend: str):
    prog = SosProgram()
    prog.assert_sos(SosExpr.of(p, p.arity), "p")
    return prog, prog.solve(backend)


def test_svec_layout():
    assert svec_len(3) == 6
    assert [svec_index(i, j) for j in range(3) for i in range(j + 1)] == list(range(6))
    M = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]])
    v = svec(M)
    assert v[svec_index(0, 1)] == pytest.approx(2.0 * np.sqrt(2))
    assert np.allclose(smat(v, 3), M)
    # inner products are preserved by the scaling
    N = np.random.default_rng(0).standard_normal((3, 3))
    N = N + N.T
    assert svec(M) @ svec(N) == pytest.approx(np.trace(M @ N))


def test_new_sos_var_bases():
    prog = SosProgram()
    v = prog.new_sos_var(1, 2)
    assert v.basis == ((0,), (1,)) and v.gram_dim == 2
    v = prog.new_sos_var(2, 4)
    assert v.gram_dim == 6
    assert v.basis == ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
    v = prog.new_sos_var(3, 0)
    assert v.gram_dim == 1
    with pytest.raises(SosError):
        prog.new_sos_var(1, 3)


def test_assert_sos_degree_error_names_monomial():
    prog = SosProgram()
    with pytest.raises(SosError, match=r"\(3,\)"):
        prog.assert_sos(SosExpr.of(P("x1^3 + 1"), 1), "cubic", degree=2)


def test_compile_shapes():
    prog = SosProgram()
    prog.new_sos_var(1, 2)
    prob = prog.compile()
    assert prob.block_dims == (2,) and prob.A.shape[0] == 0
    prog = SosProgram()
    prog.assert_sos(SosExpr.of(P("x1^2 + 2*x1 + 1"), 1))
    assert prog.compile().A.shape[0] == 3
    prog = SosProgram()
    beta = prog.new_scalar("beta", 0, 1)
    prog.assert_sos(SosExpr.of(beta, 1) + P("x1^2"), "a")
    prog.assert_sos(SosExpr.of(beta, 1) * 2.0 + P("x1^4"), "b")
    prob = prog.compile()
    rows = prob.A[:, beta.index].nonzero()[0]
    names = {prob.row_names[r].split(":")[0] for r in rows}
    assert names == {"a", "b"}


def test_compile_deterministic():
    def build():
        prog = SosProgram()
        s = prog.new_scalar("s", 0, 1)
        e, _ = prog.putinar_block(SosExpr.of(s, 2) + P("x1^2*x2^2 - x1", 2), box_to_polynomials(Box([0, 0], [1, 1])))
        prog.assert_sos(e)
        prog.minimize({s: 1.0})
        return prog.compile().to_text()

    assert build() == build()
    assert build().startswith("conic-sparse 1\ndims ")


@pytest.mark.parametrize("backend", BACKENDS)
def test_assert_sos_examples(backend):
    prog, sol = certify(P("x1^2 + 2*x1 + 1"), backend)
    assert sol.status == OPTIMAL
    assert gram_polynomial(prog.grams[0], sol.grams[0]).allclose(P("x1^2 + 2*x1 + 1"), atol=1e-6)
    for bad in ["x1", "x1^2 - 3*x1 + 2"]:
        _, sol = certify(P(bad), backend)
        assert sol.status != OPTIMAL
    assert P("x1^2 - 3*x1 + 2").eval([1.5]) < 0


@pytest.mark.parametrize("backend", BACKENDS)
def test_solve_examples(backend):
    prog = SosProgram()
    beta = prog.new_scalar("beta", 0, 1)
    prog.assert_sos(SosExpr.of(beta, 1), "b")
    prog.minimize({beta: 1.0})
    sol = prog.solve(backend)
    assert sol.ok and abs(sol.value(beta)) <= 1e-7
    prog, sol = certify(P("x1^2 + 1"), backend)
    assert sol.ok and np.allclose(sol.grams[0], np.eye(2), atol=1e-5)


@pytest.mark.parametrize("backend", BACKENDS)
def test_putinar_examples(backend):
    for gamma, h, md in [
        (P("1"), P("x1 - x1^2"), 0),
        (P("x1"), P("x1"), 0),
        (P("x1 - x1^2"), P("x1 - x1^2"), 0),  # 0.25 - (x - 0.5)^2 on [0, 1]
    ]:
        prog = SosProgram()
        e, mults = prog.putinar_block(gamma, SemiAlgebraicSet((h,), 1), multiplier_degree=md)
        prog.assert_sos(e)
        sol = prog.solve(backend)
        assert sol.ok, (gamma, sol.message)
    shifted = Polynomial.variable(0, 1) - 0.5
    assert (0.25 - shifted * shifted).allclose(P("x1 - x1^2"))


@pytest.mark.parametrize("backend", BACKENDS)
def test_putinar_certifies_nonnegativity_on_set(backend):
    # 1 - x^2 is negative outside [-1, 1] but nonnegative on it
    prog = SosProgram()
    e, _ = prog.putinar_block(P("1 - x1^2"), box_to_polynomials(Box([-1], [1])), target_degree=2)
    prog.assert_sos(e)
    assert prog.solve(backend).ok
    prog = SosProgram()
    prog.assert_sos(SosExpr.of(P("1 - x1^2"), 1))
    assert not prog.solve(backend).ok


def test_multiplier_degree_default():
    prog = SosProgram()
    h = box_to_polynomials(Box([0, 0], [1, 1]))
    _, mults = prog.putinar_block(SosExpr.of(P("x1^4", 2), 2), h)
    assert [m.degree for m in mults] == [2, 2]
    _, mults = prog.putinar_block(SosExpr.of(P("x1^4", 2), 2), SemiAlgebraicSet((P("x1 - 1", 2),), 2))
    assert [m.degree for m in mults] == [2]


def random_sos(rng, arity, degree):
    prog = SosProgram()
    v = prog.new_sos_var(arity, degree)
    k = v.gram_dim
    G = rng.standard_normal((k, k))
    return gram_polynomial(v, G @ G.T / k)


@pytest.mark.parametrize("backend", BACKENDS)
def test_round_trip_random_grams(backend):
    rng = np.random.default_rng(11)
    for _ in range(10):
        arity = int(rng.integers(1, 3))
        p = random_sos(rng, arity, 4)
        prog, sol = certify(p, backend)
        assert sol.ok
        rec = gram_polynomial(prog.grams[0], sol.grams[0])
        assert max(abs(rec.coefficient(e) - c) for e, c in p.terms.items()) <= 1e-6


@pytest.mark.parametrize("backend", BACKENDS)
def test_infeasible_status(backend):
    prog = SosProgram()
    s = prog.new_scalar("s", 0, 1)
    prog.assert_sos(SosExpr.of(s, 1) - 2.0, "needs s >= 2")
    sol = prog.solve(backend)
    assert sol.status in (INFEASIBLE, NUMERICAL_FAILURE)


def test_validate_rejects_bad_points():
    prog = SosProgram()
    prog.assert_sos(SosExpr.of(P("x1^2 + 1"), 1))
    prob = prog.compile()
    x = np.zeros(prob.n_vars)
    res, _, ok = validate(prob, x)
    assert not ok and res["equality_max"] == pytest.approx(1.0)


def test_check_certificate_flags_perturbed_gram():
    prog, sol = certify(P("x1^2 + 1"), "reference")
    assert check_certificate(prog, sol, samples=200).ok
    sol.grams[0] = sol.grams[0] - 1e-3 * np.eye(2) - np.diag([1.0, 0.0]) * (sol.grams[0][0, 0])
    rep = check_certificate(prog, sol, samples=200)
    assert rep.eigen_flags


def test_resolve_backend():
    assert resolve_backend("reference") == "reference"
    assert resolve_backend("auto") in ("reference", "clarabel")
    with pytest.raises(ValueError):
        resolve_backend("nope")


def test_ipm_small_lp_sdp():
    # min x00 + x11 s.t. x01 = 1 over 2x2 PSD: optimum 2 at [[1,1],[1,1]]
    import scipy.sparse as sp

    A = sp.csr_matrix(np.array([[0.0, 1.0 / np.sqrt(2), 0.0]]))
    res = solve_lp_sdp(
        np.zeros(0), sp.csr_matrix((1, 0)), [np.array([1.0, 0.0, 1.0])], [A], [2], np.array([1.0])
    )
    assert res.status == "optimal"
    assert np.allclose(res.X[0], [[1, 1], [1, 1]], atol=1e-6)
