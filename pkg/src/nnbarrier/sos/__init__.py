"""Sum-of-squares programs: construction, compilation, solving and auditing."""

from .program import (
    ConicProblem,
    Scalar,
    SosError,
    SosExpr,
    SosProgram,
    SosVar,
    gram_polynomial,
    smat,
    svec,
    svec_index,
    svec_len,
)
from .solve import (
    INFEASIBLE,
    NUMERICAL_FAILURE,
    OPTIMAL,
    CertificateReport,
    ConicSolution,
    Tolerances,
    check_certificate,
    clarabel_available,
    resolve_backend,
    solve_program,
)

__all__ = [
    "ConicProblem",
    "Scalar",
    "SosError",
    "SosExpr",
    "SosProgram",
    "SosVar",
    "gram_polynomial",
    "smat",
    "svec",
    "svec_index",
    "svec_len",
    "INFEASIBLE",
    "NUMERICAL_FAILURE",
    "OPTIMAL",
    "CertificateReport",
    "ConicSolution",
    "Tolerances",
    "check_certificate",
    "clarabel_available",
    "resolve_backend",
    "solve_program",
]
