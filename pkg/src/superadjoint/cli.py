"""Command-line front end.

Exit codes: 0 success, 1 failed checks, 2 configuration error, 3 numerical
failure.  All files written by one command are byte-identical across runs;
wall-clock times appear only with ``--timing``.
"""

from __future__ import annotations

import argparse
import glob
import json
import sys
import time
from pathlib import Path

from . import __version__
from ._io import dumps, write_csv, write_json
from .checks import format_table, inject, run_checks
from .config import Scenario, load_scenario
from .descent import baseline_gradient_solve, solve
from .errors import ConfigError, NonFiniteState, SuperAdjointError
from .flow import IntegrationCounter, integrate_flow
from .meanfield import mf_descent, mf_pmp_residual, particle_flow
from .variations import pmp_residual

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _scenario(args) -> Scenario:
    sc = load_scenario(args.config)
    if getattr(args, "n_steps", None) is not None:
        if args.n_steps < 1:
            raise ConfigError("--n-steps must be positive")
        sc = sc.with_steps(args.n_steps)
    if getattr(args, "particles", None) is not None:
        if args.particles < 1:
            raise ConfigError("--particles must be positive")
        sc = sc.with_particles(args.particles)
    if getattr(args, "seed", None) is not None:
        sc = sc.with_seed(args.seed)
    return sc


def _grid_meta(grid) -> dict:
    return {"t0": grid.t0, "T": grid.T, "n_steps": grid.n_steps, "h": grid.h}


def _trace_summary(trace, counter) -> dict:
    return {
        "initial_cost": trace.initial_cost,
        "final_cost": trace.final_cost,
        "iterations": trace.iterations,
        "stop_reason": trace.stop_reason,
        "integrations": counter.passes,
        "trace": trace.to_dict()["records"],
    }


def _finish(report: dict, out: Path, args, started: float) -> None:
    if args.timing:
        report["wall_clock_seconds"] = time.perf_counter() - started
    write_json(out / "report.json", report)
    if args.json:
        sys.stdout.write(dumps(report))
    else:
        summary = {k: report[k] for k in ("scenario", "final_cost", "iterations", "integrations")
                   if k in report}
        print("  ".join(f"{k}={v}" for k, v in summary.items()))


def cmd_solve(args) -> int:
    started = time.perf_counter()
    sc = _scenario(args)
    if sc.is_mean_field:
        raise ConfigError(f"{sc.source}: has a [meanfield] section; use 'mf-solve'")
    problem = sc.problem()
    out = Path(args.out)
    counter = IntegrationCounter()
    u, trace = solve(problem, sc.start_control(), sc.descent, counter)
    traj = integrate_flow(problem, u)
    trace.to_csv(out / "trace.csv")
    u.to_csv(out / "control.csv")
    traj.to_csv(out / "trajectory.csv")
    report = {
        "scenario": sc.scenario_id,
        "problem": sc.name,
        "command": "solve",
        "seed": sc.seed,
        "grid": _grid_meta(sc.grid),
        "pmp_residual": pmp_residual(problem, u).residual,
        "final_state": traj.final,
    }
    report.update(_trace_summary(trace, counter))
    if args.baseline:
        bcounter = IntegrationCounter()
        _, btrace = baseline_gradient_solve(problem, sc.start_control(), sc.descent, bcounter)
        btrace.to_csv(out / "trace_baseline.csv")
        report["baseline"] = _trace_summary(btrace, bcounter)
    _finish(report, out, args, started)
    return EXIT_OK


def cmd_mf_solve(args) -> int:
    started = time.perf_counter()
    sc = _scenario(args)
    if not sc.is_mean_field:
        raise ConfigError(f"{sc.source}: no [meanfield] section; use 'solve'")
    mfp = sc.problem()
    out = Path(args.out)
    counter = IntegrationCounter()
    u, trace = mf_descent(mfp, sc.start_control(), sc.descent, counter)
    path = particle_flow(mfp, u)
    trace.to_csv(out / "trace.csv")
    u.to_csv(out / "control.csv")
    path.to_csv(out / "ensemble.csv")
    report = {
        "scenario": sc.scenario_id,
        "problem": sc.name,
        "command": "mf-solve",
        "seed": sc.seed,
        "particles": mfp.particles,
        "grid": _grid_meta(sc.grid),
        "pmp_residual": mf_pmp_residual(mfp, u).residual,
        "final_mean": path.final.mean(axis=0),
    }
    report.update(_trace_summary(trace, counter))
    _finish(report, out, args, started)
    return EXIT_OK


def cmd_check(args) -> int:
    sc = _scenario(args)
    problem = sc.problem()
    if args.inject:
        try:
            problem = inject(problem, args.inject)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    results = run_checks(problem, sc.seed)
    failed = [r.name for r in results if not r.passed]
    payload = {"scenario": sc.scenario_id, "problem": sc.name, "seed": sc.seed,
               "grid": _grid_meta(sc.grid), "checks": [r.to_dict() for r in results],
               "passed": not failed}
    if args.out:
        write_json(Path(args.out) / "checks.json", payload)
    if args.json:
        sys.stdout.write(dumps(payload))
    else:
        sys.stdout.write(format_table(results))
    if failed:
        print("failed: " + "; ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_bench(args) -> int:
    paths = sorted(glob.glob(args.pattern))
    if not paths:
        raise ConfigError(f"no scenario files match {args.pattern!r}")
    rows = []
    for path in paths:
        args.config = path
        sc = _scenario(args)
        if sc.is_mean_field:
            print(f"skipping {path}: mean-field scenarios have no baseline", file=sys.stderr)
            continue
        problem = sc.problem()
        for method, runner in (("feedback", solve), ("baseline", baseline_gradient_solve)):
            counter = IntegrationCounter()
            _, trace = runner(problem, sc.start_control(), sc.descent, counter)
            rows.append({"scenario": sc.scenario_id, "method": method, "final_cost": trace.final_cost,
                         "iterations": trace.iterations, "integrations": counter.passes,
                         "stop_reason": trace.stop_reason})
    if not rows:
        raise ConfigError(f"no ODE scenarios among {args.pattern!r}")
    header = ["scenario", "method", "final_cost", "iterations", "integrations", "stop_reason"]
    if args.out:
        write_csv(Path(args.out) / "bench.csv", header, ([r[k] for k in header] for r in rows))
    if args.json:
        sys.stdout.write(dumps({"rows": rows}))
    else:
        width = max(len(r["scenario"]) for r in rows)
        print(f"{'scenario':<{width}}  {'method':<8}  {'final_cost':>12}  {'iters':>5}  "
              f"{'integrations':>12}  stop")
        for r in rows:
            print(f"{r['scenario']:<{width}}  {r['method']:<8}  {r['final_cost']:12.5e}  "
                  f"{r['iterations']:5d}  {r['integrations']:12.2f}  {r['stop_reason']}")
    return EXIT_OK


def _pretty(obj, indent=0) -> list:
    pad = "  " * indent
    lines = []
    for key in sorted(obj):
        val = obj[key]
        if isinstance(val, dict):
            lines.append(f"{pad}{key}:")
            lines.extend(_pretty(val, indent + 1))
        elif isinstance(val, list) and val and isinstance(val[0], dict):
            lines.append(f"{pad}{key}: {len(val)} entries")
        else:
            lines.append(f"{pad}{key}: {val}")
    return lines


def cmd_report(args) -> int:
    path = Path(args.report)
    if path.is_dir():
        path = path / "report.json"
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read report {str(path)!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg})") from None
    print("\n".join(_pretty(data)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="superadjoint", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("config", help="scenario file")
        p.add_argument("--n-steps", type=int, help="override the number of grid intervals")
        p.add_argument("--particles", type=int, help="override the particle count")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--json", action="store_true", help="print machine-readable output")

    p = sub.add_parser("solve", help="feedback descent on an ODE scenario")
    common(p)
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--baseline", action="store_true", help="also run the conditional-gradient baseline")
    p.add_argument("--timing", action="store_true", help="record wall-clock time in report.json")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("mf-solve", help="feedback descent on a particle scenario")
    common(p)
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--timing", action="store_true", help="record wall-clock time in report.json")
    p.set_defaults(func=cmd_mf_solve)

    p = sub.add_parser("check", help="run the invariant battery")
    common(p)
    p.add_argument("--out", help="also write checks.json here")
    p.add_argument("--inject", metavar="NAME", help="test-only fault injection (grad_bug)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("bench", help="feedback descent against the baseline")
    p.add_argument("pattern", help="glob of scenario files")
    common(p, config=False)
    p.add_argument("--out", help="also write bench.csv here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="pretty-print a report.json")
    p.add_argument("report", help="report.json or the directory holding it")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteState, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SuperAdjointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
