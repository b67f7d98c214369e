"""Command-line entry point ``mrrk``.

Single studies::

    mrrk convergence --problem rigid_body --method "RK(4,4)" --dt 0.1,0.05,0.025 --tf 5 --relax both --out conv
    mrrk kdv --solitons 1 --method "ARK3(2)4L[2]SA" --dt 0.1 --relax energy --out kdv1

Whole manifests::

    mrrk run-all --workers 4 --out results
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .experiments import (ExperimentConfig, ManifestError, default_manifest_text, default_workers,
                          execute, run_all, write_tables)
from .kdv import RELAX_MODES
from .relaxation import SolverConfig


def _dts(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("relaxation solver")
    g.add_argument("--relax-tol", type=float, default=None, help="absolute residual tolerance")
    g.add_argument("--relax-max-iter", type=int, default=50)
    g.add_argument("--relax-fallback-grid", type=int, default=11)
    g.add_argument("--relax-no-fallback", action="store_true", help="disable the grid search")
    g.add_argument("--relax-allow-inexact", action="store_true",
                   help="accept the best residual when no root meets the tolerance")


def _solver(args) -> SolverConfig:
    return SolverConfig(tol=args.relax_tol, max_iter=args.relax_max_iter,
                        fallback=not args.relax_no_fallback,
                        fallback_grid=args.relax_fallback_grid,
                        allow_inexact=args.relax_allow_inexact)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrrk", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for kind in ("convergence", "invariants", "error-growth", "gamma-scaling"):
        p = sub.add_parser(kind, help=f"{kind} study of an ODE problem")
        p.add_argument("--problem", required=True)
        p.add_argument("--method", required=True)
        p.add_argument("--dt", type=_dts, required=True, help="step size(s), comma separated")
        p.add_argument("--tf", type=float, default=None)
        p.add_argument("--t0", type=float, default=None,
                       help="gamma-scaling: start from the exact solution at this time")
        if kind != "gamma-scaling":
            p.add_argument("--relax", choices=("off", "on", "both"), default="both")
        p.add_argument("--invariants", type=lambda s: tuple(int(v) for v in s.split(",")), default=None,
                       help="indices of the invariants to enforce (default: all)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--id", default=None, help="file name stem (default: the study kind)")
        _add_solver_flags(p)

    p = sub.add_parser("kdv", help="KdV soliton run")
    p.add_argument("--solitons", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--method", default="ARK3(2)4L[2]SA")
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--domain", type=float, nargs=2, default=None, metavar=("LEFT", "RIGHT"))
    p.add_argument("--t0", type=float, default=None)
    p.add_argument("--tf", type=float, default=None)
    p.add_argument("--relax", choices=RELAX_MODES, default="off")
    p.add_argument("--out", default=".")
    p.add_argument("--id", default=None)
    _add_solver_flags(p)

    p = sub.add_parser("run-all", help="run a manifest and write the summary")
    p.add_argument("--manifest", default=None, help="manifest file (default: the shipped one)")
    p.add_argument("--workers", type=int, default=default_workers())
    p.add_argument("--out", default="results")
    p.add_argument("--criteria-only", action="store_true",
                   help="skip entries without acceptance checks")
    return parser


def _config(args) -> ExperimentConfig:
    kind = args.command
    if kind == "kdv":
        return ExperimentConfig(args.id or f"kdv-{args.solitons}", "kdv", method=args.method,
                                dt=(args.dt,), tf=args.tf, t0=args.t0, relax=args.relax,
                                solver=_solver(args), solitons=args.solitons, N=args.N,
                                domain=tuple(args.domain) if args.domain else None)
    return ExperimentConfig(args.id or kind, kind, problem=args.problem, method=args.method,
                            dt=args.dt, tf=args.tf, t0=args.t0, relax=getattr(args, "relax", "on"),
                            invariants=args.invariants, solver=_solver(args))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run-all":
        text = Path(args.manifest).read_text() if args.manifest else default_manifest_text()
        summary = run_all(text, args.out, workers=args.workers, criteria_only=args.criteria_only)
        for r in summary.rows:
            crit = "-" if r.criterion is None else r.criterion
            status = "pass" if r.passed else "FAIL"
            print(f"{status:4}  [{crit}] {r.experiment:40} {r.metric:28} {r.value:<12.4g} {r.band}")
        print(f"summary written to {Path(args.out) / 'summary.csv'}")
        return 0 if summary.passed else 1

    try:
        cfg = _config(args)
        if cfg.kind in ("convergence", "invariants", "error-growth") and cfg.tf is None:
            raise ManifestError(f"{cfg.kind} needs --tf")
        cfg = replace(cfg).validate()
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = execute(cfg)
    if result.error:
        print(f"error: {result.error}", file=sys.stderr)
        return 1
    for path in write_tables(result, args.out):
        print(f"wrote {path}")
    for key, value in result.metrics.items():
        print(f"{key} = {value:.6g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
