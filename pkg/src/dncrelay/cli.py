"""Command-line interface.

Every subcommand prints its JSON result to stdout. On failure a JSON object
``{"error": ..., "type": ..., "command": ...}`` goes to stderr and the exit
status is nonzero (1 for bad input, 2 for usage errors, 3 for infeasible
or unstable configurations).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .ergodic_opt import ErgodicSolution
from .experiments import PRESETS, ExperimentSpec, preset, run_experiment
from .markov import actual_energy, analyze_pair
from .scenario import Scenario, dump_json, load_json, solution_from_dict
from .sim import SimConfig, SimReport, UnstableError, run_eersp
from .static_opt import InfeasibleError

EXIT_INPUT = 1
EXIT_INFEASIBLE = 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _scenario(args) -> Scenario:
    scen = Scenario.load(args.scenario) if args.scenario else Scenario()
    if getattr(args, "eps", None) is not None:
        scen = scen.with_(eps=args.eps)
    if getattr(args, "seed", None) is not None:
        scen = scen.with_(seed=args.seed)
    if getattr(args, "slots", None) is not None:
        scen = scen.with_(slots=args.slots)
    if getattr(args, "trunc", None) is not None:
        scen = scen.with_(trunc=args.trunc)
    return scen


def _solution(args, scen: Scenario):
    if getattr(args, "solution", None):
        if args.eps is not None:
            raise CliError("--eps cannot be combined with --solution; the back-off is fixed at solve time")
        return solution_from_dict(load_json(args.solution))
    return scen.solve()


def _out(args) -> Path | None:
    if args.out is None:
        return None
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(payload: dict, out: Path | None, filename: str):
    text = dump_json(payload)
    if out is not None:
        (out / filename).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_solve_static(args):
    scen = _scenario(args).with_(channel="static")
    sol = scen.solve(conventional=args.conventional or None)
    _emit(sol.to_dict(), _out(args), "solution.json")


def cmd_solve_ergodic(args):
    scen = _scenario(args).with_(channel="rayleigh")
    sol = scen.solve(conventional=args.conventional or None)
    _emit(sol.to_dict(max_packets=args.max_packets, quantization=scen.quantization), _out(args), "solution.json")


def cmd_queue_analysis(args):
    scen = _scenario(args)
    sol = _solution(args, scen)
    kw = dict(trunc=scen.trunc, quantization=scen.quantization, auto=not args.fixed_trunc)
    _, m1 = analyze_pair(sol, sol.rates, 1, **kw)
    _, m2 = analyze_pair(sol, sol.rates, 2, **kw)
    payload = {
        "pair1": {"Q1": m1.mean_source, "Qr2": m1.mean_relay, **_diag(m1)},
        "pair2": {"Q2": m2.mean_source, "Qr1": m2.mean_relay, **_diag(m2)},
        "design_energy": sol.total_energy,
    }
    if not isinstance(sol, ErgodicSolution):
        payload["actual_energy"] = actual_energy(m1, m2, sol, scen.quantization)
    out = _out(args)
    if out is not None:
        with open(out / "marginals.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "Q1", "Qr2", "Q2", "Qr1"])
            cols = [m1.source_marginal, m1.relay_marginal, m2.source_marginal, m2.relay_marginal]
            for n in range(max(c.size for c in cols)):
                w.writerow([n] + [repr(float(c[n])) if n < c.size else "" for c in cols])
    _emit(payload, out, "queue_analysis.json")


def _diag(m):
    return {
        "boundary_mass": m.boundary_mass,
        "residual": m.residual,
        "truncation": [m.shape[0] - 1, m.shape[1] - 1],
        "warnings": m.warnings,
    }


def _write_trace(path: Path, report: SimReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SimReport.TRACE_COLUMNS)
        for row in report.trace:
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def cmd_simulate(args):
    scen = _scenario(args)
    sol = _solution(args, scen)
    cfg = SimConfig(
        sol,
        sol.rates,
        slots=scen.slots,
        seed=scen.seed,
        quantization=scen.quantization,
        fallback_gain=args.fallback_gain,
        guard=args.guard,
    )
    out = _out(args)
    try:
        report = run_eersp(cfg)
    except UnstableError as exc:
        if out is not None:
            _write_trace(out / "trace.csv", exc.report)
        raise CliError(f"{exc}; partial report: {json.dumps(exc.report.to_dict())}", EXIT_INFEASIBLE) from exc
    payload = report.to_dict()
    payload["design_energy"] = sol.total_energy
    if out is not None:
        _write_trace(out / "trace.csv", report)
    _emit(payload, out, "sim_report.json")


def cmd_experiment(args):
    overrides = {}
    for key in ("seed", "slots", "trunc", "workers"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    if args.preset:
        spec = preset(args.preset, **overrides)
    elif args.scenario:
        d = load_json(args.scenario)
        d = d.get("experiment", d)  # a run manifest embeds its spec
        d.update(overrides)
        spec = ExperimentSpec.from_dict(d)
    else:
        raise CliError("experiment needs --preset or --scenario")
    if args.eps is not None:
        spec.cases = {k: v.with_(eps=args.eps) for k, v in spec.cases.items()}
    out = Path(args.out or ".")
    result = run_experiment(spec, out, figures=not args.no_figures)
    _emit(
        {
            "csv": str(result.csv_path),
            "manifest": str(result.manifest_path),
            "figures": [str(p) for p in result.figures],
            "rows": len(result.rows),
            "failed_rows": len(result.failed),
        },
        None,
        "",
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dncrelay", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, eps=True):
        sp.add_argument("--scenario", help="scenario JSON file (defaults to unit gains)")
        sp.add_argument("--out", help="directory for output files")
        if eps:
            sp.add_argument("--eps", type=float, help="override the back-off factor")

    sp = sub.add_parser("solve-static", help="minimum-energy allocation for fixed gains")
    common(sp)
    sp.add_argument("--conventional", action="store_true", help="disable network coding")
    sp.set_defaults(func=cmd_solve_static)

    sp = sub.add_parser("solve-ergodic", help="water-filling allocation under Rayleigh fading")
    common(sp)
    sp.add_argument("--conventional", action="store_true", help="disable network coding")
    sp.add_argument("--max-packets", type=int, default=16, help="length of the rate-level tables")
    sp.set_defaults(func=cmd_solve_ergodic)

    sp = sub.add_parser("queue-analysis", help="stationary queue lengths and actual energy")
    common(sp)
    sp.add_argument("--solution", help="solution JSON from solve-static or solve-ergodic")
    sp.add_argument("--trunc", type=int, help="initial truncation depth")
    sp.add_argument("--fixed-trunc", action="store_true", help="do not double the truncation")
    sp.set_defaults(func=cmd_queue_analysis)

    sp = sub.add_parser("simulate", help="slot-level simulation of the scheduling protocol")
    common(sp)
    sp.add_argument("--solution", help="solution JSON from solve-static or solve-ergodic")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--slots", type=int)
    sp.add_argument("--guard", type=int, default=10**6, help="abort when a queue exceeds this length")
    sp.add_argument("--fallback-gain", choices=("coded", "receiver"), default="coded")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("experiment", help="run a sweep; writes CSV, manifest and PNG figures")
    common(sp)
    sp.add_argument("--preset", choices=PRESETS)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--slots", type=int)
    sp.add_argument("--trunc", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        return _fail(args, exc, exc.code)
    except InfeasibleError as exc:
        return _fail(args, exc, EXIT_INFEASIBLE)
    except (ValueError, KeyError, TypeError, OSError, ArithmeticError, json.JSONDecodeError) as exc:
        return _fail(args, exc, EXIT_INPUT)
    return 0


def _fail(args, exc, code) -> int:
    msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
    sys.stderr.write(json.dumps({"error": str(msg), "type": type(exc).__name__, "command": args.command}) + "\n")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
