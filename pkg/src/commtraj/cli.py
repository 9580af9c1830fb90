"""Command-line front end: ``commtraj solve | validate | sweep``.

Exit codes: 0 converged and audited, 2 iteration limit, 3 stalled,
4 audit failure, 64 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .audit import audit
from .config import ConfigError, LoadedScenario, bundled_scenarios, load_scenario, with_overrides
from .outputs import emit_outputs, read_trajectory
from .scp import CONVERGED, MAX_ITERS, STALLED, run

EXIT_OK = 0
EXIT_MAX_ITERS = 2
EXIT_STALLED = 3
EXIT_AUDIT = 4
EXIT_USAGE = 64

log = logging.getLogger("commtraj")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def exit_code(status: str, audit_passed: bool | None) -> int:
    if status == MAX_ITERS:
        return EXIT_MAX_ITERS
    if status == STALLED:
        return EXIT_STALLED
    if status == CONVERGED and audit_passed:
        return EXIT_OK
    return EXIT_AUDIT


def _apply_overrides(loaded: LoadedScenario, args, qmin_mb=None) -> LoadedScenario:
    return with_overrides(loaded, **{
        "mission.q_min_megabytes": qmin_mb if qmin_mb is not None else getattr(args, "qmin", None),
        "solver.iter_max": args.max_iters,
        "solver.eps": args.tol,
        "solver.lambda": args.lam,
        "solver.trust_init": args.trust_init,
    })


def solve_one(loaded: LoadedScenario, outdir) -> tuple[int, dict]:
    """Solve, audit and emit; returns ``(exit code, summary line fields)``."""
    sc, cfg = loaded.scenario, loaded.config
    result = run(sc, cfg)
    try:
        report = audit(result, sc)
    except Exception as exc:  # resimulation failure is an audit failure
        log.error("audit failed to run: %s", exc)
        report = None
    emit_outputs(result, report, sc, outdir, loaded.document)
    passed = report is not None and report.passed
    code = exit_code(result.status, passed)
    return code, {
        "scenario": sc.name,
        "q_min_megabytes": loaded.document["mission"]["q_min_megabytes"],
        "status": result.status,
        "iterations": len(result.log),
        "T_s": round(result.T, 3),
        "audit_passed": passed,
        "failures": [] if report is None else report.failures,
        "exit_code": code,
        "out": str(outdir),
    }


def _sweep_worker(job):
    doc, outdir = job
    from .config import build

    return solve_one(build(doc), outdir)


def cmd_solve(args) -> int:
    loaded = _apply_overrides(load_scenario(args.scenario), args)
    code, info = solve_one(loaded, args.out)
    print(json.dumps(info))
    return code


def cmd_validate(args) -> int:
    loaded = load_scenario(args.scenario)
    try:
        traj = read_trajectory(args.trajectory)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if traj.N != loaded.scenario.N:
        raise UsageError(f"trajectory has {traj.N} nodes, scenario expects {loaded.scenario.N}")
    report = audit(traj, loaded.scenario)
    print(json.dumps({"passed": report.passed, "failures": report.failures,
                      "achieved_throughput_bits": report.achieved_throughput,
                      "terminal_group_errors": report.terminal_group_errors}))
    if args.out:
        from .outputs import _clean, _json

        Path(args.out).write_text(_json(_clean(report.to_dict())))
    return EXIT_OK if report.passed else EXIT_AUDIT


def cmd_sweep(args) -> int:
    try:
        values = [float(v) for v in args.qmin.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--qmin expects comma-separated megabytes, got {args.qmin!r}") from None
    if not values:
        raise UsageError("--qmin needs at least one value")
    base = load_scenario(args.scenario)
    jobs = []
    for mb in values:
        loaded = _apply_overrides(base, args, qmin_mb=mb)
        jobs.append((loaded.document, Path(args.out) / f"qmin_{mb:g}mb"))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(j) for j in jobs]
    for _, info in results:
        print(json.dumps(info))
    return max(code for code, _ in results)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="commtraj", description="Communication-constrained quadrotor trajectories by SCP.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def overrides(sp):
        sp.add_argument("--max-iters", type=int, help="override solver.iter_max")
        sp.add_argument("--tol", type=float, help="override solver.eps (stopping gap)")
        sp.add_argument("--lambda", dest="lam", type=float, help="override solver.lambda (penalty weight)")
        sp.add_argument("--trust-init", type=float, help="override solver.trust_init")

    names = ", ".join(bundled_scenarios())
    s = sub.add_parser("solve", help="solve one scenario and write artifacts")
    s.add_argument("scenario", help=f"YAML file or bundled name ({names})")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--qmin", type=float, help="override mission.q_min_megabytes")
    overrides(s)
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("validate", help="audit a trajectory file against a scenario")
    v.add_argument("trajectory", help="trajectory.csv written by solve")
    v.add_argument("scenario", help=f"YAML file or bundled name ({names})")
    v.add_argument("--out", help="write the audit report JSON here")
    v.set_defaults(func=cmd_validate)

    w = sub.add_parser("sweep", help="solve a family of throughput demands")
    w.add_argument("--qmin", required=True, help="comma-separated demands in MB, e.g. 30,50,70")
    w.add_argument("--scenario", default="freespace_30mb", help="base scenario (default: freespace_30mb)")
    w.add_argument("--out", required=True, help="output directory, one subdirectory per demand")
    w.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    overrides(w)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        for name in ("max_iters", "jobs"):
            val = getattr(args, name, None)
            if val is not None and val < 1:
                raise UsageError(f"--{name.replace('_', '-')} must be at least 1")
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"commtraj: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
