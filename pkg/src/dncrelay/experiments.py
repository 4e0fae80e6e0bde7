"""Parameter sweeps over scenarios, written out as CSV plus a JSON manifest."""

from __future__ import annotations

import csv
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .ergodic_opt import ErgodicSolution, static_average_energy
from .markov import actual_energy, analyze_pair
from .scenario import Scenario, dump_json
from .sim import SimConfig, run_eersp
from .static_opt import brute_force_oracle, solve_conventional

__all__ = ["ExperimentSpec", "ExperimentResult", "PRESETS", "preset", "run_experiment", "QUANTITIES"]

log = logging.getLogger(__name__)

SWEEPS = ("lambda1", "lambda2", "eps")
QUANTITIES = (
    "static",
    "conventional",
    "oracle",
    "ergodic",
    "ergodic_conventional",
    "static_average",
    "queue",
    "simulate",
)
# output column order; only computed columns are written
COLUMNS = (
    "dnc_static_energy",
    "conventional_energy",
    "oracle_energy",
    "ergodic_energy",
    "ergodic_conventional_energy",
    "static_avg_energy",
    "design_energy",
    "q1_analytic",
    "q1_sim",
    "qr2_analytic",
    "qr2_sim",
    "eact_analytic",
    "eact_sim",
)
TOLERANCES = {"oracle_rel": 0.01, "queue_rel": 0.05, "energy_rel": 0.05}


@dataclass
class ExperimentSpec:
    name: str
    sweep: str
    grid: list
    cases: dict
    quantities: list
    slots: int = 10**6
    seed: int = 0
    draws: int = 200
    trunc: int = 64
    max_trunc: int = 128
    workers: int = 1

    def __post_init__(self):
        if self.sweep not in SWEEPS:
            raise ValueError(f"sweep must be one of {SWEEPS}")
        if not self.grid:
            raise ValueError("grid must be nonempty")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("grid must be strictly increasing")
        if not self.cases:
            raise ValueError("at least one case is required")
        bad = set(self.quantities) - set(QUANTITIES)
        if bad:
            raise ValueError(f"unknown quantities {sorted(bad)}")
        self.cases = {k: v if isinstance(v, Scenario) else Scenario.from_dict(v) for k, v in self.cases.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cases"] = {k: v.to_dict() for k, v in self.cases.items()}
        return d


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list
    columns: list
    csv_path: Path | None = None
    manifest_path: Path | None = None
    figures: list = field(default_factory=list)

    @property
    def failed(self) -> list:
        return [r for r in self.rows if r["status"] != "ok"]


def _row_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1)[0])


def _queue_row(sol, scen: Scenario, spec: ExperimentSpec, out: dict):
    rates = scen.rates
    kw = dict(trunc=spec.trunc, quantization=scen.quantization, max_trunc=spec.max_trunc)
    _, m1 = analyze_pair(sol, rates, 1, **kw)
    out["q1_analytic"] = m1.mean_source
    out["qr2_analytic"] = m1.mean_relay
    if not isinstance(sol, ErgodicSolution):
        _, m2 = analyze_pair(sol, rates, 2, **kw)
        out["eact_analytic"] = actual_energy(m1, m2, sol, scen.quantization)["total"]


def _evaluate(args):
    spec, case, value, index = args
    scen = spec.cases[case].with_(**{spec.sweep: value})
    row = {spec.sweep: value, "case": case}
    try:
        q = set(spec.quantities)
        sol = None
        if "static" in q:
            static = scen.with_(channel="static").solve(conventional=False)
            row["dnc_static_energy"] = static.total_energy
        if "conventional" in q:
            row["conventional_energy"] = solve_conventional(scen.channel_gains, scen.rates).total_energy
        if "oracle" in q:
            alloc = brute_force_oracle(scen.channel_gains, scen.rates, conventional=scen.conventional)
            row["oracle_energy"] = alloc.total_energy
        if "ergodic" in q:
            row["ergodic_energy"] = scen.with_(channel="rayleigh").solve(conventional=False).total_energy
        if "ergodic_conventional" in q:
            row["ergodic_conventional_energy"] = scen.with_(channel="rayleigh").solve(conventional=True).total_energy
        if "static_average" in q:
            mean, _ = static_average_energy(
                scen.distributions, scen.rates, draws=spec.draws, seed=_row_seed(spec.seed, index)
            )
            row["static_avg_energy"] = mean
        if "queue" in q or "simulate" in q:
            sol = scen.solve()
            row["design_energy"] = sol.total_energy
        if "queue" in q:
            _queue_row(sol, scen, spec, row)
        if "simulate" in q:
            cfg = SimConfig(sol, scen.rates, slots=spec.slots, seed=_row_seed(spec.seed, index), quantization=scen.quantization)
            rep = run_eersp(cfg)
            row["q1_sim"] = rep.mean_q1
            row["qr2_sim"] = rep.mean_r2
            row["eact_sim"] = rep.energy_per_slot
        row["status"] = "ok"
        row["error"] = ""
    except Exception as exc:  # a failed row must not stop the sweep
        log.warning("row %s=%s case %s failed: %s", spec.sweep, value, case, exc)
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def run_experiment(spec: ExperimentSpec, out_dir=None, figures: bool = True) -> ExperimentResult:
    """Evaluate every (case, grid value) row; write CSV, manifest and figures.

    Rows are ordered by case then sweep value regardless of ``workers``.
    Errors inside a row are recorded in its ``status``/``error`` columns.
    """
    jobs = [(spec, case, float(v), i) for i, (case, v) in enumerate((c, v) for c in spec.cases for v in spec.grid)]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as ex:
            rows = list(ex.map(_evaluate, jobs))
    else:
        rows = [_evaluate(j) for j in jobs]
    present = [c for c in COLUMNS if any(c in r for r in rows)]
    columns = [spec.sweep, "case", *present, "status", "error"]
    result = ExperimentResult(spec, rows, columns)
    if out_dir is None:
        return result
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.csv_path = out / f"{spec.name}.csv"
    with open(result.csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, float("nan"))) for c in columns])
    if figures:
        from .plotting import plot_experiment

        result.figures = plot_experiment(result, out)
    result.manifest_path = out / f"{spec.name}.manifest.json"
    dump_json(
        {
            "experiment": spec.to_dict(),
            "csv": result.csv_path.name,
            "figures": [p.name for p in result.figures],
            "rows": len(rows),
            "failed_rows": len(result.failed),
            "tolerances": TOLERANCES,
            "versions": {
                "dncrelay": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
        },
        result.manifest_path,
    )
    return result


def _grid(lo, hi, n):
    return [round(float(x), 10) for x in np.linspace(lo, hi, n)]


def _links(a, b, c, d):
    return {"g1r": a, "g2r": b, "gr1": c, "gr2": d}


def preset(name: str, **overrides) -> ExperimentSpec:
    """Ready-made sweeps; keyword overrides replace spec fields."""
    unit = Scenario(name="unit", gains=_links(1.0, 1.0, 1.0, 1.0), arrivals={"lambda1": 0.5, "lambda2": 1.0, "eps": 0.0})
    if name == "oracle":
        d = dict(sweep="lambda1", grid=_grid(0.1, 2.0, 20), cases={"unit": unit}, quantities=["static", "oracle"])
    elif name == "coding-gain":
        d = dict(sweep="lambda1", grid=_grid(0.1, 2.0, 20), cases={"unit": unit}, quantities=["static", "conventional"])
    elif name == "fading":
        case1 = unit.with_(name="case1", channel="rayleigh")
        case2 = case1.with_(name="case2", gains=_links(1.0, 2.0, 2.0, 1.0))
        d = dict(
            sweep="lambda1",
            grid=_grid(0.1, 2.0, 20),
            cases={"case1": case1, "case2": case2},
            quantities=["ergodic", "ergodic_conventional", "static_average"],
        )
    elif name == "actual-energy":
        scen = unit.with_(name="asym", gains=_links(1.0, 2.0, 1.0, 2.0), eps=0.5)
        d = dict(sweep="lambda1", grid=_grid(0.1, 0.9, 9), cases={"asym": scen}, quantities=["queue", "simulate"])
    elif name == "queue-eps":
        d = dict(sweep="eps", grid=_grid(0.1, 0.9, 9), cases={"unit": unit}, quantities=["queue", "simulate"])
    elif name == "queue-eps-fading":
        scen = unit.with_(name="unit-rayleigh", channel="rayleigh")
        d = dict(sweep="eps", grid=_grid(0.1, 0.9, 9), cases={"rayleigh": scen}, quantities=["queue", "simulate"])
    else:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d.update(overrides)
    return ExperimentSpec(name=d.pop("name", name), **d)


PRESETS = ("oracle", "coding-gain", "fading", "actual-energy", "queue-eps", "queue-eps-fading")
