"""Topology and outage estimates from measurements, plus an exhaustive oracle."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .measurement import MeasurementSet
from .milp.builder import BuildConfig, build_problem
from .milp.lp import LpRelaxation
from .milp.problem import MilpProblem
from .milp.solver import SolverConfig, solve, solve_with_fixed_binaries
from .network import NetworkModel, Topology, check_radial, enumerate_operational_topologies

#: oracle margins below this are reported as ties
TIE_TOL = 1e-9
#: capacitor binaries swept exhaustively per topology up to this count
CAP_SWEEP_LIMIT = 8


class EstimationError(RuntimeError):
    """Solver did not certify an optimum, or its answer is not a valid topology."""


@dataclass(frozen=True)
class EstimatorConfig:
    build: BuildConfig = field(default_factory=BuildConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class TopologyEstimate:
    switch_status: dict[str, int]
    section_status: dict[int, int]
    cap_status: dict[tuple[str, str], int]
    estimated_loads: dict[str, tuple[float, float]]
    estimated_flows: dict[tuple[str, str], tuple[float, float]]
    objective: float
    stats: dict = field(default_factory=dict)
    residuals: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "switch_status": dict(sorted(self.switch_status.items())),
            "section_status": {str(k): v for k, v in sorted(self.section_status.items())},
            "cap_status": {f"{c}:{ph}": v for (c, ph), v in sorted(self.cap_status.items())},
            "objective": self.objective,
            "estimated_loads": {k: list(v) for k, v in sorted(self.estimated_loads.items())},
            "estimated_flows": {f"{ln}:{ph}": list(v)
                                for (ln, ph), v in sorted(self.estimated_flows.items())},
            "residuals": self.residuals,
            # wall-clock time is left out so identical runs serialize identically
            "stats": {k: v for k, v in sorted(self.stats.items()) if k != "wall_seconds"},
        }


def _round_binary(v: float, tol: float, what: str) -> int:
    r = round(v)
    if abs(v - r) > tol or r not in (0, 1):
        raise EstimationError(f"{what} = {v!r} is not integral within {tol}")
    return int(r)


def decode(model: NetworkModel, problem: MilpProblem, x: np.ndarray,
           tol: float) -> tuple[dict, dict, dict]:
    sw, sec, cap = {}, {}, {}
    for j, ref in enumerate(problem.variables):
        if ref.kind == "delta":
            sw[ref.key[0]] = _round_binary(x[j], tol, str(ref))
        elif ref.kind == "y":
            sec[ref.key[0]] = _round_binary(x[j], tol, str(ref))
        elif ref.kind == "yc":
            cap[ref.key] = _round_binary(x[j], tol, str(ref))
    return sw, sec, cap


def estimate(model: NetworkModel, meas: MeasurementSet,
             config: EstimatorConfig | None = None) -> TopologyEstimate:
    config = config or EstimatorConfig()
    problem = build_problem(model, meas, config.build)
    res = solve(problem, config.solver)
    if res.status != "optimal":
        raise EstimationError(
            f"solver stopped with status {res.status} after {res.nodes_explored} nodes "
            f"({res.wall_seconds:.2f} s)")
    sw, sec, cap = decode(model, problem, res.x, config.solver.integrality_tol)
    problems = check_radial(model, sw, sec)
    if problems:
        raise EstimationError("estimate is not radial: " + "; ".join(problems))

    loads, flows = {}, {}
    for j, ref in enumerate(problem.variables):
        if ref.kind == "p":
            loads[ref.key[0]] = (float(res.x[j]), loads.get(ref.key[0], (0.0, 0.0))[1])
        elif ref.kind == "q":
            loads[ref.key[0]] = (loads.get(ref.key[0], (0.0, 0.0))[0], float(res.x[j]))
        elif ref.kind == "P":
            flows[ref.key] = (float(res.x[j]), flows.get(ref.key, (0.0, 0.0))[1])
        elif ref.kind == "Q":
            flows[ref.key] = (flows.get(ref.key, (0.0, 0.0))[0], float(res.x[j]))
    stats = {
        "status": res.status,
        "nodes": res.nodes_explored,
        "lp_iterations": res.lp_iterations,
        "root_bound": res.root_bound,
        "wall_seconds": res.wall_seconds,
    }
    return TopologyEstimate(sw, sec, cap, loads, flows, res.objective, stats,
                            problem.residual_summary(res.x))


@dataclass
class OracleRow:
    switch_status: dict[str, int]
    section_status: dict[int, int]
    cap_status: dict[tuple[str, str], int]
    objective: float  # inf when the topology contradicts the data (e.g. pings)


@dataclass
class OracleResult:
    rows: list[OracleRow]
    best: int
    margin: float  # second-best minus best objective over distinct topologies

    @property
    def best_row(self) -> OracleRow:
        return self.rows[self.best]

    @property
    def objective(self) -> float:
        return self.rows[self.best].objective

    @property
    def tie(self) -> bool:
        return self.margin < TIE_TOL

    def to_csv(self, model: NetworkModel) -> str:
        sws = list(model.switch_ids)
        secs = [s.id for s in model.sections]
        head = ["index"] + sws + [f"section_{s}" for s in secs] + ["objective", "best"]
        out = [",".join(head)]
        for i, r in enumerate(self.rows):
            cells = [str(i)] + [str(r.switch_status[s]) for s in sws]
            cells += [str(r.section_status[s]) for s in secs]
            cells += [repr(r.objective) if math.isfinite(r.objective) else "inf",
                      str(int(i == self.best))]
            out.append(",".join(cells))
        return "\n".join(out) + "\n"


def _topology_columns(problem: MilpProblem, topo: Topology) -> dict[int, float]:
    fixed = {}
    for sw, v in topo.switch_status.items():
        fixed[problem.col("delta", sw)] = v
    for sid, v in topo.section_status.items():
        fixed[problem.col("y", sid)] = v
    return fixed


def evaluate_topologies(model: NetworkModel, meas: MeasurementSet, topologies: list[Topology],
                        config: EstimatorConfig | None = None) -> list[OracleRow]:
    """Best fit of each topology, with capacitor states optimized per topology."""
    config = config or EstimatorConfig()
    problem = build_problem(model, meas, config.build)
    lp = LpRelaxation(problem, config.solver.lp_feas_tol)
    bins = problem.binaries
    pos = {j: k for k, j in enumerate(bins)}
    cap_cols = [problem.col("yc", *cp) for cp in model.cap_phases]
    rows = []
    for topo in topologies:
        fixed = _topology_columns(problem, topo)
        vec = np.zeros(len(bins))
        for j, v in fixed.items():
            vec[pos[j]] = v
        best, best_caps = math.inf, None
        if len(cap_cols) <= CAP_SWEEP_LIMIT:
            for combo in itertools.product((0, 1), repeat=len(cap_cols)):
                for j, v in zip(cap_cols, combo):
                    vec[pos[j]] = v
                r = solve_with_fixed_binaries(problem, vec, config.solver, lp=lp)
                if r.objective < best:
                    best, best_caps = r.objective, combo
        else:
            r = solve(problem, config.solver, fixed=fixed, lp=lp)
            if r.status == "optimal":
                best = r.objective
                best_caps = tuple(int(round(r.x[j])) for j in cap_cols)
        caps = {cp: int(v) for cp, v in zip(model.cap_phases, best_caps or (0,) * len(cap_cols))}
        rows.append(OracleRow(dict(topo.switch_status), dict(topo.section_status), caps, best))
    return rows


def oracle_estimate(model: NetworkModel, meas: MeasurementSet, max_count: int = 100_000,
                    config: EstimatorConfig | None = None,
                    include_outages: bool = True) -> OracleResult:
    """Exhaustive minimum over every enumerable radial topology."""
    topologies = enumerate_operational_topologies(model, include_outages, max_count)
    rows = evaluate_topologies(model, meas, topologies, config)
    objs = np.array([r.objective for r in rows])
    order = np.argsort(objs, kind="stable")
    best = int(order[0])
    margin = float(objs[order[1]] - objs[best]) if len(rows) > 1 else math.inf
    return OracleResult(rows, best, margin)
