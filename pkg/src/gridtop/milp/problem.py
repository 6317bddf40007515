"""Solver-agnostic MILP container."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

TAGS = ("Eq4", "Eq5", "Eq12", "Eq13", "Eq14", "Eq15", "Eq16", "Eq17", "Eq18", "Eq19", "Eq20", "bounds")


class VarRef(NamedTuple):
    kind: str
    key: tuple

    def __str__(self):
        return f"{self.kind}[{','.join(map(str, self.key))}]"


@dataclass(frozen=True)
class LinearConstraint:
    terms: tuple[tuple[float, int], ...]  # (coefficient, column)
    sense: str  # "<=", "=", ">="
    rhs: float
    tag: str

    def activity(self, x: np.ndarray) -> float:
        return sum(c * x[j] for c, j in self.terms)

    def violation(self, x: np.ndarray) -> float:
        lhs = self.activity(x)
        if self.sense == "<=":
            return max(0.0, lhs - self.rhs)
        if self.sense == ">=":
            return max(0.0, self.rhs - lhs)
        return abs(lhs - self.rhs)


@dataclass
class MilpProblem:
    """Minimize ``cost @ x`` subject to tagged linear constraints and bounds."""

    variables: list[VarRef]
    lb: np.ndarray
    ub: np.ndarray
    integer: np.ndarray
    cost: np.ndarray
    constraints: list[LinearConstraint]
    big_m: float = 0.0
    metadata: dict = field(default_factory=dict)

    @cached_property
    def index(self) -> dict[VarRef, int]:
        return {v: i for i, v in enumerate(self.variables)}

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def binaries(self) -> np.ndarray:
        return np.flatnonzero(self.integer)

    def col(self, kind: str, *key) -> int:
        return self.index[VarRef(kind, tuple(key))]

    def refs_of(self, kind: str) -> list[VarRef]:
        return [v for v in self.variables if v.kind == kind]

    @cached_property
    def arrays(self) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
        """(A, row_lower, row_upper) with infinite sides for one-sided rows."""
        rows, cols, vals = [], [], []
        lo = np.empty(len(self.constraints))
        hi = np.empty(len(self.constraints))
        for i, con in enumerate(self.constraints):
            for c, j in con.terms:
                rows.append(i)
                cols.append(j)
                vals.append(c)
            lo[i] = con.rhs if con.sense in (">=", "=") else -np.inf
            hi[i] = con.rhs if con.sense in ("<=", "=") else np.inf
        A = sp.csr_matrix((vals, (rows, cols)), shape=(len(self.constraints), self.n_vars))
        return A, lo, hi

    def vector(self, assignment: Mapping[VarRef, float] | Sequence[float] | np.ndarray) -> np.ndarray:
        if isinstance(assignment, Mapping):
            missing = [v for v in self.variables if v not in assignment]
            if missing:
                raise KeyError(f"assignment lacks {len(missing)} variables, e.g. {missing[0]}")
            return np.array([assignment[v] for v in self.variables], dtype=float)
        x = np.asarray(assignment, dtype=float)
        if x.shape != (self.n_vars,):
            raise KeyError(f"assignment has {x.shape} entries, expected {self.n_vars}")
        return x

    def _row_violation(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        A, lo, hi = self.arrays
        act = A @ x
        viol = np.maximum(np.maximum(lo - act, act - hi), 0.0)
        # magnitude of the largest term in each row, for relative tolerances
        mag = abs(A).multiply(np.abs(x)).max(axis=1).toarray().ravel() if A.nnz else np.zeros(len(lo))
        rhs = np.where(np.isfinite(lo), np.abs(lo), 0.0)
        rhs = np.maximum(rhs, np.where(np.isfinite(hi), np.abs(hi), 0.0))
        return viol, np.maximum(1.0, np.maximum(mag, rhs))

    def violations(self, assignment, tol: float = 1e-9, scaled: bool = True) -> list[tuple[int, str, float]]:
        """Rows (and bounds) violated by more than ``tol``.

        With ``scaled`` the tolerance is relative to the row's magnitude
        (max of |rhs| and the largest |coefficient * x| term), floored at 1.
        """
        x = self.vector(assignment)
        viol, scale = self._row_violation(x)
        limit = tol * scale if scaled else np.full_like(viol, tol)
        out = [(int(i), self.constraints[i].tag, float(viol[i]))
               for i in np.flatnonzero(viol > limit)]
        lo_bad = np.flatnonzero(x < self.lb - tol * np.maximum(1.0, np.abs(self.lb)))
        hi_bad = np.flatnonzero(x > self.ub + tol * np.maximum(1.0, np.abs(self.ub)))
        for j in lo_bad:
            out.append((-1 - int(j), "bounds", float(self.lb[j] - x[j])))
        for j in hi_bad:
            out.append((-1 - int(j), "bounds", float(x[j] - self.ub[j])))
        return out

    def residual_summary(self, assignment) -> dict[str, float]:
        """Largest absolute violation per constraint tag."""
        x = self.vector(assignment)
        viol, _ = self._row_violation(x)
        out: dict[str, float] = defaultdict(float)
        for con, v in zip(self.constraints, viol.tolist()):
            out[con.tag] = max(out[con.tag], v)
        return dict(sorted(out.items()))

    def tag_counts(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for con in self.constraints:
            out[con.tag] += 1
        return dict(out)


def objective_of(problem: MilpProblem, assignment) -> float:
    """Weighted absolute-error objective of a full variable valuation."""
    x = problem.vector(assignment)
    return float(problem.cost @ x)


class ProblemBuilder:
    """Incremental construction helper used by the formulation code."""

    def __init__(self):
        self.variables: list[VarRef] = []
        self.index: dict[VarRef, int] = {}
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.integer: list[bool] = []
        self.cost: list[float] = []
        self.constraints: list[LinearConstraint] = []

    def var(self, kind: str, key: tuple, lb: float, ub: float, integer: bool = False,
            cost: float = 0.0) -> int:
        ref = VarRef(kind, key)
        if ref in self.index:
            raise ValueError(f"duplicate variable {ref}")
        if not (math.isfinite(lb) and math.isfinite(ub)) or lb > ub:
            raise ValueError(f"variable {ref} needs finite bounds lb <= ub, got [{lb}, {ub}]")
        j = len(self.variables)
        self.variables.append(ref)
        self.index[ref] = j
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.integer.append(integer)
        self.cost.append(float(cost))
        return j

    def add(self, terms, sense: str, rhs: float, tag: str):
        if tag not in TAGS:
            raise ValueError(f"unknown constraint tag {tag!r}")
        if sense not in ("<=", "=", ">="):
            raise ValueError(f"unknown sense {sense!r}")
        merged: dict[int, float] = {}
        for c, j in terms:
            merged[j] = merged.get(j, 0.0) + c
        clean = tuple((c, j) for j, c in merged.items() if c != 0.0)
        if not all(math.isfinite(c) for c, _ in clean) or not math.isfinite(rhs):
            raise ValueError(f"non-finite coefficient in {tag} row")
        self.constraints.append(LinearConstraint(clean, sense, float(rhs), tag))

    def build(self, big_m: float, metadata: dict) -> MilpProblem:
        return MilpProblem(
            variables=self.variables,
            lb=np.array(self.lb),
            ub=np.array(self.ub),
            integer=np.array(self.integer, dtype=bool),
            cost=np.array(self.cost),
            constraints=self.constraints,
            big_m=big_m,
            metadata=metadata,
        )
