"""Time the numba kernels against their pure-numpy counterparts.

Run with ``python benchmarks/bench_kernels.py``.  Both paths are called
directly, so the ``NNBARRIER_DISABLE_NUMBA`` flag only matters when it hides
numba entirely (then only the numpy rows are printed).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from nnbarrier import _kernels
from nnbarrier.poly import monomials_up_to


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def poly_case(rng, arity: int, degree: int, points: int):
    exps = np.array(monomials_up_to(arity, degree), dtype=np.int64)
    coefs = rng.standard_normal(exps.shape[0])
    pts = rng.uniform(-1, 1, size=(points, arity))
    return exps, coefs, pts


def schur_case(rng, k: int, rows: int, nnz: int):
    """Random symmetric constraint matrices in coordinate form, as the IPM builds them."""
    p = rng.integers(0, k, (rows, nnz))
    q = rng.integers(0, k, (rows, nnz))
    v = rng.standard_normal((rows, nnz))
    # each entry appears in both orientations so every A_i is symmetric
    rows_p = np.concatenate([p, q], axis=1).reshape(-1)
    rows_q = np.concatenate([q, p], axis=1).reshape(-1)
    vals = np.concatenate([v, v], axis=1).reshape(-1)
    indptr = np.arange(0, rows * 2 * nnz + 1, 2 * nnz)
    G = rng.standard_normal((k, k))
    X = G @ G.T + k * np.eye(k)
    H = rng.standard_normal((k, k))
    S_inv = np.linalg.inv(H @ H.T + k * np.eye(k))
    return indptr, rows_p, rows_q, vals, X, S_inv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    have = _kernels.HAVE_NUMBA
    print(f"numba available: {have}")
    print(f"{'kernel':<34}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}{'max |diff|':>12}")

    for arity, degree, points in [(2, 4, 100_000), (4, 4, 100_000), (4, 8, 20_000)]:
        exps, coefs, pts = poly_case(rng, arity, degree, points)
        ref = _kernels.poly_eval_batch_numpy(exps, coefs, pts)
        t_np = best_of(lambda: _kernels.poly_eval_batch_numpy(exps, coefs, pts), args.repeat)
        label = f"poly_eval n={arity} d={degree} p={points}"
        if have:
            _kernels._poly_eval_batch_nb(exps, coefs, pts)  # compile
            got = _kernels._poly_eval_batch_nb(exps, coefs, pts)
            t_nb = best_of(lambda: _kernels._poly_eval_batch_nb(exps, coefs, pts), args.repeat)
            print(f"{label:<34}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>10.1f}{np.max(np.abs(got - ref)):>12.1e}")
        else:
            print(f"{label:<34}{1e3 * t_np:>12.2f}{'-':>12}{'-':>10}{'-':>12}")

    for k, rows, nnz in [(15, 200, 4), (35, 800, 6), (70, 2000, 8)]:
        case = schur_case(rng, k, rows, nnz)
        ref = _kernels.schur_block_numpy(*case)
        t_np = best_of(lambda: _kernels.schur_block_numpy(*case), args.repeat)
        label = f"schur_block k={k} rows={rows} nnz={nnz}"
        if have:
            _kernels._schur_block_nb(*case)
            got = _kernels._schur_block_nb(*case)
            t_nb = best_of(lambda: _kernels._schur_block_nb(*case), args.repeat)
            diff = np.max(np.abs(got - ref)) / max(1.0, np.max(np.abs(ref)))
            print(f"{label:<34}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>10.1f}{diff:>12.1e}")
        else:
            print(f"{label:<34}{1e3 * t_np:>12.2f}{'-':>12}{'-':>10}{'-':>12}")


if __name__ == "__main__":
    main()
