"""Fixed-format MPS export and plain-text solution import."""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

from .problem import MilpProblem, objective_of
from .solver import SolveResult

OBJ_ROW = "obj"
_SENSE = {"<=": "L", ">=": "G", "=": "E"}


class MpsError(ValueError):
    """Naming collision on export or malformed solution text on import."""


def column_names(problem: MilpProblem) -> list[str]:
    """``<kind>_<ordinal within kind>`` for every column, in column order."""
    seen: dict[str, int] = defaultdict(int)
    out = []
    for ref in problem.variables:
        out.append(f"{ref.kind}_{seen[ref.kind]}")
        seen[ref.kind] += 1
    return out


def row_names(problem: MilpProblem) -> list[str]:
    seen: dict[str, int] = defaultdict(int)
    out = []
    for con in problem.constraints:
        out.append(f"{con.tag}_{seen[con.tag]}")
        seen[con.tag] += 1
    return out


def _num(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def _entry(name: str, row: str, value: float) -> str:
    return f"    {name:<8}  {row:<8}  {_num(value):>12}"


def export_mps(problem: MilpProblem, name: str = "GRIDTOP") -> str:
    cols = column_names(problem)
    rows = row_names(problem)
    if len(set(cols)) != len(cols) or len(set(rows)) != len(rows) or OBJ_ROW in rows:
        raise MpsError("name collision in MPS export")

    by_col: list[list[tuple[str, float]]] = [[] for _ in cols]
    for r, con in zip(rows, problem.constraints):
        for c, j in con.terms:
            by_col[j].append((r, c))

    out = [f"NAME          {name}", "ROWS", f" N  {OBJ_ROW}"]
    out += [f" {_SENSE[con.sense]}  {r}" for r, con in zip(rows, problem.constraints)]
    out.append("COLUMNS")
    in_int = False
    marker = 0
    for j, cname in enumerate(cols):
        if problem.integer[j] != in_int:
            kind = "'INTORG'" if problem.integer[j] else "'INTEND'"
            out.append(f"    MARKER{marker:<4d}  'MARKER'                 {kind}")
            marker += 1
            in_int = bool(problem.integer[j])
        out.append(_entry(cname, OBJ_ROW, problem.cost[j]))
        for r, c in by_col[j]:
            out.append(_entry(cname, r, c))
    if in_int:
        out.append(f"    MARKER{marker:<4d}  'MARKER'                 'INTEND'")
    out.append("RHS")
    for r, con in zip(rows, problem.constraints):
        if con.rhs != 0.0:
            out.append(_entry("RHS", r, con.rhs))
    out.append("BOUNDS")
    for j, cname in enumerate(cols):
        lo, hi = problem.lb[j], problem.ub[j]
        if lo == hi:
            out.append(f" FX {'BND':<8}  {cname:<8}  {_num(lo):>12}")
            continue
        if lo != 0.0:
            out.append(f" LO {'BND':<8}  {cname:<8}  {_num(lo):>12}")
        out.append(f" UP {'BND':<8}  {cname:<8}  {_num(hi):>12}")
    out.append("ENDATA")
    return "\n".join(out) + "\n"


def parse_solution(text: str) -> dict[str, float]:
    vals: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MpsError(f"line {lineno}: expected '<name> <value>', got {raw!r}")
        try:
            v = float(parts[1])
        except ValueError:
            raise MpsError(f"line {lineno}: bad value {parts[1]!r}") from None
        if not math.isfinite(v):
            raise MpsError(f"line {lineno}: non-finite value")
        if parts[0] in vals:
            raise MpsError(f"line {lineno}: duplicate name {parts[0]!r}")
        vals[parts[0]] = v
    return vals


def import_result(text: str, problem: MilpProblem) -> SolveResult:
    """Map an external ``name value`` solution back onto ``problem``.

    Names outside the problem (for instance an objective line) are ignored;
    every column must be present.
    """
    vals = parse_solution(text)
    cols = column_names(problem)
    missing = [c for c in cols if c not in vals]
    if missing:
        raise MpsError(f"solution lacks {len(missing)} columns, e.g. {missing[0]}")
    x = np.array([vals[c] for c in cols], dtype=float)
    return SolveResult("optimal", objective_of(problem, x), x, problem.variables)
