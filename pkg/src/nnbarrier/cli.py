"""Command-line front end.

Exit codes: 0 when the safety threshold is certified, 2 when the run
finished below it, 1 on any error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .barrier import (
    BarrierCertificate,
    BarrierDegreeError,
    SynthesisError,
    audit_certificate,
    region_beta_table,
    synthesize,
)
from .control import ControlPolicy, LpMode, controlled_fraction, synthesize_controller
from .geometry import partition_uniform
from .model import ProblemError, load_problem
from .relax import BoundMode, bound_partition, envelopes_to_csv
from .sim import check_certificate_soundness, estimate_safety, simulate, trajectory_csv
from .sos.solve import DEFAULT_TOLERANCES

log = logging.getLogger("nnbarrier")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BELOW = 2
REPORT_SCHEMA_VERSION = 1


@dataclass
class RunReport:
    command: str
    spec_path: str
    spec_sha256: str
    mode: str
    regions: int
    eta: float | None
    beta: float | None
    P_s: float | None
    threshold: float
    per_region_beta: list[dict] = field(default_factory=list)
    controlled_fraction: float = 0.0
    timings: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    version: str = __version__
    flags: dict = field(default_factory=dict)
    dim: int = 0
    certificate: dict | None = None
    details: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        doc = json.loads(text)
        if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ProblemError(f"unsupported report schema_version {doc.get('schema_version')!r}", "schema_version")
        return cls(**doc)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _flags(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",) and not callable(v)}


def _apply_tolerances(pairs: list[str]) -> dict[str, float]:
    """Parse ``KEY=VALUE`` overrides for the solver validation tolerances."""
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or key not in ("equality", "eig_floor", "sample", "audit"):
            raise ProblemError(f"bad tolerance override {item!r}; use equality|eig_floor|sample|audit=VALUE", "--tolerance")
        out[key] = float(value)
    for key in ("equality", "eig_floor", "sample"):
        if key in out:
            setattr(DEFAULT_TOLERANCES, key, out[key])
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepare(args):
    spec = load_problem(args.spec)
    if args.degree is not None:
        spec = spec.with_overrides(barrier_degree=args.degree)
    t0 = time.perf_counter()
    partition = partition_uniform(spec.safe_set, spec.partition_widths)
    envelopes = bound_partition(spec.network, partition, args.bounds, threads=args.threads)
    return spec, partition, envelopes, time.perf_counter() - t0


def _beta_rows(cert: BarrierCertificate, partition) -> list[dict]:
    return cert.to_dict(partition)["per_region_beta"]


def _audit(args, cert, spec, partition, envelopes, tols, shifts=None) -> dict:
    if not args.audit:
        return {}
    rep = audit_certificate(
        cert, spec, partition, envelopes, samples=args.audit, rng=np.random.default_rng(args.seed),
        tol=tols.get("audit", 1e-6), shifts=shifts,
    )
    return {"ok": rep.ok, "checks": rep.checks, **{k: v for k, v in asdict(rep).items()}}


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_certify(args) -> int:
    tols = _apply_tolerances(args.tolerance)
    spec, partition, envelopes, t_bounds = _prepare(args)
    t0 = time.perf_counter()
    cert = synthesize(
        spec, partition, envelopes, args.bounds, backend=args.backend, threads=args.threads, convex=args.convex
    )
    t_sos = time.perf_counter() - t0
    details = {"audit": _audit(args, cert, spec, partition, envelopes, tols)}
    report = RunReport(
        command="certify",
        spec_path=str(args.spec),
        spec_sha256=file_sha256(args.spec),
        mode=args.bounds,
        regions=len(partition),
        eta=cert.eta,
        beta=cert.beta,
        P_s=cert.P_s,
        threshold=spec.threshold,
        per_region_beta=_beta_rows(cert, partition),
        timings={"bounds": t_bounds, "sos": t_sos, **cert.timings},
        seed=args.seed,
        flags=_flags(args),
        dim=spec.dim,
        certificate=cert.to_dict(partition),
        details=details,
    )
    out = _out_dir(args)
    (out / "report.json").write_text(report.to_json() + "\n")
    print(f"P_s = {cert.P_s:.6f} (eta = {cert.eta:.6g}, beta = {cert.beta:.6g}, |Q| = {len(partition)}, mode = {args.bounds})")
    print(f"report: {out / 'report.json'}")
    return EXIT_OK if cert.P_s >= spec.threshold else EXIT_BELOW


def cmd_synthesize(args) -> int:
    tols = _apply_tolerances(args.tolerance)
    spec, partition, envelopes, t_bounds = _prepare(args)
    if spec.control is None:
        raise ProblemError("control structure required", "control")
    res = synthesize_controller(
        spec, partition, envelopes, args.bounds, backend=args.backend, lp_mode=args.lp_mode, seed=args.seed,
        threads=args.threads, convex=args.convex,
    )
    cert = res.certificate
    shifts = res.policy.shifts() if res.policy.entries else None
    audit_envs = envelopes
    if res.closed_loop_recertified:
        audit_envs = [env.shifted(spec.control.g @ res.policy.u(q)) for q, env in enumerate(envelopes)]
        shifts = None
    # the final barrier on the uncontrolled dynamics, for before/after maps under one B
    uncontrolled = region_beta_table(
        cert.B, partition, envelopes, spec.noise.variances, args.bounds, backend=args.backend, threads=args.threads
    )
    details = {
        "summary": res.summary(partition),
        "uncontrolled_beta": [
            {"region_id": q, "lower": list(map(float, r.lower)), "upper": list(map(float, r.upper)), "beta": uncontrolled[q]}
            for q, r in enumerate(partition)
        ],
        "initial_certificate": res.initial_certificate.to_dict(partition),
        "history": [asdict(h) for h in res.history],
        "control_effect": {str(q): list(v) for q, v in res.control_effect.items()},
        "audit": _audit(args, cert, spec, partition, audit_envs, tols, shifts),
    }
    report = RunReport(
        command="synthesize",
        spec_path=str(args.spec),
        spec_sha256=file_sha256(args.spec),
        mode=args.bounds,
        regions=len(partition),
        eta=cert.eta,
        beta=cert.beta,
        P_s=cert.P_s,
        threshold=spec.threshold,
        per_region_beta=_beta_rows(cert, partition),
        controlled_fraction=controlled_fraction(res.policy, partition),
        timings={"bounds": t_bounds, **res.timings},
        seed=args.seed,
        flags=_flags(args),
        dim=spec.dim,
        certificate=cert.to_dict(partition),
        details=details,
    )
    out = _out_dir(args)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "policy.csv").write_text(res.policy.to_csv())
    (out / "summary.json").write_text(res.summary_json(partition) + "\n")
    print(
        f"P_s {res.initial_certificate.P_s:.6f} -> {cert.P_s:.6f}; "
        f"controlled {len(res.policy)}/{len(partition)} regions in {res.iterations} iterations"
    )
    print(f"report: {out / 'report.json'}  policy: {out / 'policy.csv'}")
    return EXIT_OK if res.reached else EXIT_BELOW


def cmd_simulate(args) -> int:
    spec = load_problem(args.spec)
    partition = partition_uniform(spec.safe_set, spec.partition_widths)
    policy = None
    if args.policy:
        if spec.control is None:
            raise ProblemError("a policy needs a control structure in the problem", "control")
        policy = ControlPolicy.from_csv(Path(args.policy).read_text(), spec.control)
    t0 = time.perf_counter()
    est = estimate_safety(
        spec, policy, samples=args.samples, init_grid=args.init_grid, seed=args.seed, partition=partition,
        threads=args.threads,
    )
    t_mc = time.perf_counter() - t0
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "command": "simulate", "spec_path": str(args.spec),
           "spec_sha256": file_sha256(args.spec), "version": __version__, "flags": _flags(args),
           "estimate": est.to_dict(), "timings": {"mc": t_mc}}
    if args.certificate:
        rep = json.loads(Path(args.certificate).read_text())
        p_cert = float(rep["P_s"])
        verdict = check_certificate_soundness(p_cert, est)
        doc["soundness"] = {"certified_P_s": p_cert, "passed": verdict.passed, "margin": verdict.margin}
    out = _out_dir(args)
    (out / "estimate.json").write_text(json.dumps(doc, indent=2) + "\n")
    for i in range(args.trajectories):
        x0 = spec.initial_set.center if i == 0 else spec.initial_set.sample(np.random.default_rng([args.seed, i]), 1)[0]
        states, _, controls = simulate(spec, x0, policy, partition, seed=args.seed, index=i)
        (out / f"trajectory_{i}.csv").write_text(trajectory_csv(states, controls, spec.safe_set))
    print(f"p_hat = {est.p_hat:.6f} +/- {est.ci_half_width:.6f} (99% Wilson), per_init_min = {est.per_init_min:.6f}, M = {est.samples}")
    if "soundness" in doc:
        s = doc["soundness"]
        print(f"soundness: {'pass' if s['passed'] else 'FAIL'} (margin {s['margin']:.6f})")
    return EXIT_OK


def betamap_svg(rows: list[dict], cell: int = 24) -> str:
    """Grayscale grid of per-region values; darker means larger."""
    lows = np.array([r["lower"] for r in rows], dtype=float)
    ups = np.array([r["upper"] for r in rows], dtype=float)
    vals = np.array([r["beta"] for r in rows], dtype=float)
    xs = np.unique(lows[:, 0])
    ys = np.unique(lows[:, 1])
    top = vals.max() if vals.size and vals.max() > 0 else 1.0
    W, H = cell * len(xs), cell * len(ys)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<title>{escape(f'per-region beta, max {top:.4g}')}</title>",
    ]
    for lo, up, v, r in zip(lows, ups, vals, rows):
        i = int(np.searchsorted(xs, lo[0]))
        j = len(ys) - 1 - int(np.searchsorted(ys, lo[1]))
        shade = int(round(255 * (1.0 - v / top)))
        parts.append(
            f'<rect x="{i * cell}" y="{j * cell}" width="{cell}" height="{cell}" '
            f'fill="rgb({shade},{shade},{shade})" stroke="#888" stroke-width="0.5">'
            f"<title>region {r['region_id']}: {v:.6g}</title></rect>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_betamap(args) -> int:
    doc = json.loads(Path(args.report).read_text())
    if args.which == "initial":
        rows = doc["details"]["initial_certificate"]["per_region_beta"]
    elif args.which == "uncontrolled":
        if "uncontrolled_beta" not in doc["details"]:
            raise ProblemError("report has no uncontrolled table; it comes from synthesize", "details")
        rows = doc["details"]["uncontrolled_beta"]
    else:
        rows = doc["per_region_beta"]
    out = _out_dir(args)
    stem = f"betamap_{args.which}"
    lines = ["region_id,beta," + ",".join(f"l_{i + 1}" for i in range(doc["dim"])) + "," + ",".join(f"u_{i + 1}" for i in range(doc["dim"]))]
    for r in rows:
        lines.append(",".join([str(r["region_id"]), repr(float(r["beta"]))] + [repr(float(v)) for v in r["lower"] + r["upper"]]))
    (out / f"{stem}.csv").write_text("\n".join(lines) + "\n")
    print(f"csv: {out / (stem + '.csv')}")
    if doc["dim"] != 2:
        print(f"notice: heatmap needs a 2-D partition, this report is {doc['dim']}-D; CSV only")
        return EXIT_OK
    (out / f"{stem}.svg").write_text(betamap_svg(rows))
    print(f"svg: {out / (stem + '.svg')}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    spec, partition, envelopes, t_bounds = _prepare(args)
    out = _out_dir(args)
    (out / "bounds.csv").write_text(envelopes_to_csv(envelopes, args.bounds))
    (out / "partition.csv").write_text(partition.to_csv())
    print(f"{len(partition)} regions bounded in {t_bounds:.3f}s ({args.bounds}); csv: {out / 'bounds.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--threads", type=int, default=1, help="maximum worker threads")
    common.add_argument("--bounds", choices=[m.value for m in BoundMode], default="linear", help="network envelope mode")
    common.add_argument("--degree", type=int, default=None, help="override the barrier degree")
    common.add_argument(
        "--tolerance", action="append", metavar="KEY=VALUE",
        help="override a tolerance: equality, eig_floor, sample or audit (repeatable)",
    )
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--backend", choices=["auto", "reference", "clarabel"], default="auto", help="SOS solver backend")
    common.add_argument("--convex", action="store_true", help="also require the barrier to be SOS-convex")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nnbarrier", description="Stochastic barrier certificates for neural network dynamic models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("certify", parents=[common], help="certify a safety probability bound")
    p.add_argument("spec")
    p.add_argument("--audit", type=int, default=0, metavar="SAMPLES", help="sample-check the certificate")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("synthesize", parents=[common], help="synthesize a minimally invasive controller")
    p.add_argument("spec")
    p.add_argument("--lp-mode", choices=[m.value for m in LpMode], default=LpMode.EXISTENTIAL.value)
    p.add_argument("--audit", type=int, default=0, metavar="SAMPLES", help="sample-check the final certificate")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("simulate", parents=[common], help="Monte-Carlo safety estimate")
    p.add_argument("spec")
    p.add_argument("--policy", help="policy CSV written by synthesize")
    p.add_argument("-M", "--samples", type=int, default=10_000)
    p.add_argument("--init-grid", type=int, default=3, help="grid points per axis of the initial set")
    p.add_argument("--trajectories", type=int, default=1, help="number of trajectory CSV files to write")
    p.add_argument("--certificate", help="report.json whose P_s is audited against the estimate")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("betamap", parents=[common], help="per-region beta table and heatmap")
    p.add_argument("report")
    p.add_argument(
        "--which", choices=["final", "initial", "uncontrolled"], default="final",
        help="final certificate, initial certificate, or final barrier without control",
    )
    p.set_defaults(func=cmd_betamap)

    p = sub.add_parser("bounds", parents=[common], help="dump per-region network envelopes")
    p.add_argument("spec")
    p.set_defaults(func=cmd_bounds)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ProblemError as e:
        print(f"error: {e}", file=sys.stderr)
    except (BarrierDegreeError, SynthesisError, ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
