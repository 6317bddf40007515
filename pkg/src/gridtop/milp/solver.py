"""Branch and bound over LP relaxations."""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .lp import LpRelaxation
from .problem import MilpProblem, VarRef

STATUSES = ("optimal", "infeasible", "node_limit", "time_limit")


@dataclass(frozen=True)
class SolverConfig:
    integrality_tol: float = 1e-6
    lp_feas_tol: float = 1e-9
    rel_gap_tol: float = 1e-6
    node_limit: int = 100_000
    time_limit_seconds: float = 600.0
    branching: str = "most-fractional"
    node_selection: str = "best-bound"
    # variable kinds branched on before any other fractional binary
    branch_first: tuple[str, ...] = ("y",)

    def __post_init__(self):
        for name in ("integrality_tol", "lp_feas_tol", "rel_gap_tol", "time_limit_seconds"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.node_limit < 1:
            raise ValueError("node_limit must be at least 1")
        if self.branching != "most-fractional":
            raise ValueError(f"unsupported branching rule {self.branching!r}")
        if self.node_selection != "best-bound":
            raise ValueError(f"unsupported node selection {self.node_selection!r}")


@dataclass
class SolveResult:
    status: str
    objective: float
    x: np.ndarray | None
    variables: list[VarRef]
    nodes_explored: int = 0
    wall_seconds: float = 0.0
    root_bound: float = float("nan")
    lp_iterations: int = 0
    _values: dict | None = field(default=None, repr=False)

    @property
    def values(self) -> dict[VarRef, float]:
        if self._values is None:
            self._values = {} if self.x is None else dict(zip(self.variables, self.x.tolist()))
        return self._values

    def value(self, kind: str, *key) -> float:
        return self.values[VarRef(kind, tuple(key))]


def _gap(incumbent: float, tol: float) -> float:
    return tol * max(1.0, abs(incumbent))


def solve(problem: MilpProblem, config: SolverConfig | None = None,
          fixed: Mapping[int, float] | None = None,
          lp: LpRelaxation | None = None) -> SolveResult:
    """Best-bound branch and bound with most-fractional branching.

    Ties in the node queue go to the deeper node, then to the most recently
    created one, so the search dives until an incumbent exists.  Fractional
    binaries of the ``branch_first`` kinds are branched on before the rest,
    and every node restarts the simplex from its parent's basis.  ``fixed``
    pins selected binary columns (by column index) for the whole search.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    lp = lp or LpRelaxation(problem, config.lp_feas_tol)
    bins = problem.binaries
    base_lb = problem.lb[bins].copy()
    base_ub = problem.ub[bins].copy()
    first = np.array([problem.variables[j].kind in config.branch_first for j in bins], dtype=bool)
    if fixed:
        pos = {j: k for k, j in enumerate(bins)}
        for j, v in fixed.items():
            if j not in pos:
                raise ValueError(f"column {j} is not binary")
            base_lb[pos[j]] = base_ub[pos[j]] = v

    incumbent = np.inf
    best_bins: np.ndarray | None = None
    counter = itertools.count()
    # (bound, -depth, -serial, lb, ub, parent basis)
    heap = [(-np.inf, 0, 0, base_lb, base_ub, None)]
    nodes = 0
    root_bound = np.nan
    status = "optimal"

    while heap:
        bound, negdepth, _, lb, ub, basis = heapq.heappop(heap)
        if bound >= incumbent - _gap(incumbent, config.rel_gap_tol):
            continue
        if nodes >= config.node_limit:
            status = "node_limit"
            break
        if time.perf_counter() - t0 > config.time_limit_seconds:
            status = "time_limit"
            break
        nodes += 1
        if basis is not None:
            lp.restore(basis)
        st, obj, x = lp.solve(bins, lb, ub)
        if nodes == 1:
            root_bound = obj
        if st == "infeasible" or obj >= incumbent - _gap(incumbent, config.rel_gap_tol):
            continue
        xb = x[bins]
        frac = np.abs(xb - np.round(xb))
        frac[lb == ub] = 0.0
        k = int(np.argmax(frac))
        if frac[k] <= config.integrality_tol:
            incumbent = obj
            best_bins = np.round(xb)
            continue
        preferred = np.where(first, frac, 0.0)
        if preferred.max() > config.integrality_tol:
            k = int(np.argmax(preferred))
        down_ub = ub.copy()
        down_ub[k] = 0.0
        up_lb = lb.copy()
        up_lb[k] = 1.0
        parent = lp.basis()
        children = [(lb, down_ub), (up_lb, ub)]
        if xb[k] < 0.5:
            children.reverse()
        # the child pushed last pops first among equals
        for clb, cub in reversed(children):
            heapq.heappush(heap, (obj, negdepth - 1, -next(counter), clb, cub, parent))

    if best_bins is None:
        final = "infeasible" if status == "optimal" else status
        return SolveResult(final, np.inf, None, problem.variables, nodes,
                           time.perf_counter() - t0, root_bound, lp.iterations)

    # polish: continuous re-solve with the binaries pinned exactly
    st, obj, x = lp.solve(bins, best_bins, best_bins)
    if st != "optimal":
        raise RuntimeError("polishing LP of an integral incumbent turned infeasible")
    x[bins] = best_bins
    return SolveResult(status, obj, x, problem.variables, nodes,
                       time.perf_counter() - t0, root_bound, lp.iterations)


def binary_vector(problem: MilpProblem, assignment) -> np.ndarray:
    bins = problem.binaries
    if isinstance(assignment, Mapping):
        missing = [problem.variables[j] for j in bins if problem.variables[j] not in assignment]
        if missing:
            raise KeyError(f"binary assignment lacks {missing[0]}")
        vals = np.array([assignment[problem.variables[j]] for j in bins], dtype=float)
    else:
        vals = np.asarray(assignment, dtype=float)
        if vals.shape != bins.shape:
            raise KeyError(f"expected {len(bins)} binary values, got {vals.shape}")
    if not np.all((vals == 0) | (vals == 1)):
        raise ValueError("binary assignment must contain only 0 and 1")
    return vals


def solve_with_fixed_binaries(problem: MilpProblem, assignment,
                              config: SolverConfig | None = None,
                              lp: LpRelaxation | None = None) -> SolveResult:
    """LP over the continuous variables with every binary pinned.

    Passing a prepared ``lp`` reuses its simplex basis across many calls.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    vals = binary_vector(problem, assignment)
    bins = problem.binaries
    lp = lp or LpRelaxation(problem, config.lp_feas_tol)
    st, obj, x = lp.solve(bins, vals, vals)
    if st != "optimal":
        return SolveResult("infeasible", np.inf, None, problem.variables, 1,
                           time.perf_counter() - t0)
    x[bins] = vals
    return SolveResult("optimal", obj, x, problem.variables, 1, time.perf_counter() - t0,
                       obj, lp.iterations)
