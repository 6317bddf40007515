"""MILP formulation, branch-and-bound solver and MPS exchange."""

from .builder import BuildConfig, NotObservable, build_problem, ping_budget, truth_assignment
from .problem import LinearConstraint, MilpProblem, VarRef, objective_of
from .solver import SolveResult, SolverConfig, solve, solve_with_fixed_binaries
