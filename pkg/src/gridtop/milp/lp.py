"""LP relaxations on HiGHS' dual revised simplex, warm-started across bound changes."""

from __future__ import annotations

import highspy
import numpy as np

from .problem import MilpProblem


class LpFailure(RuntimeError):
    """The LP engine stopped without a usable answer."""


class UnboundedRelaxation(LpFailure):
    """An unbounded relaxation means some variable lacks bounds."""


class LpRelaxation:
    """One persistent simplex instance per MILP; only column bounds change."""

    def __init__(self, problem: MilpProblem, feas_tol: float = 1e-9):
        A, row_lo, row_hi = problem.arrays
        csc = A.tocsc()
        inf = highspy.kHighsInf
        lp = highspy.HighsLp()
        lp.num_col_ = problem.n_vars
        lp.num_row_ = A.shape[0]
        lp.col_cost_ = np.asarray(problem.cost, dtype=float)
        lp.col_lower_ = np.asarray(problem.lb, dtype=float)
        lp.col_upper_ = np.asarray(problem.ub, dtype=float)
        lp.row_lower_ = np.where(np.isfinite(row_lo), row_lo, -inf)
        lp.row_upper_ = np.where(np.isfinite(row_hi), row_hi, inf)
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = csc.indptr.astype(np.int32)
        lp.a_matrix_.index_ = csc.indices.astype(np.int32)
        lp.a_matrix_.value_ = csc.data.astype(float)

        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("presolve", "off")
        h.setOptionValue("threads", 1)
        h.setOptionValue("solver", "simplex")
        h.setOptionValue("random_seed", 0)
        h.setOptionValue("primal_feasibility_tolerance", feas_tol)
        h.setOptionValue("dual_feasibility_tolerance", feas_tol)
        h.passModel(lp)
        self._h = h
        self.n = problem.n_vars
        self.lb = np.asarray(problem.lb, dtype=float)
        self.ub = np.asarray(problem.ub, dtype=float)
        self.iterations = 0

    def solve(self, cols: np.ndarray, lb: np.ndarray, ub: np.ndarray):
        """Solve with bounds of ``cols`` replaced; returns (status, objective, x).

        ``status`` is "optimal" or "infeasible".
        """
        h = self._h
        if len(cols):
            h.changeColsBounds(len(cols), np.asarray(cols, dtype=np.int32),
                               np.asarray(lb, dtype=float), np.asarray(ub, dtype=float))
        status = self._run()
        if status is None:
            # retry from a cold start before declaring failure
            h.clearSolver()
            status = self._run()
            if status is None:
                raise LpFailure(f"LP engine returned {h.modelStatusToString(h.getModelStatus())}")
        if status == "infeasible":
            return status, np.inf, None
        x = np.asarray(h.getSolution().col_value, dtype=float)
        return status, float(h.getInfo().objective_function_value), x

    def basis(self):
        """Snapshot of the current simplex basis."""
        return self._h.getBasis()

    def restore(self, basis):
        """Restart the next solve from a saved basis."""
        self._h.setBasis(basis)

    def _run(self):
        h = self._h
        h.run()
        self.iterations += h.getInfo().simplex_iteration_count
        st = h.getModelStatus()
        if st == highspy.HighsModelStatus.kOptimal:
            return "optimal"
        if st == highspy.HighsModelStatus.kInfeasible:
            return "infeasible"
        if st in (highspy.HighsModelStatus.kUnbounded, highspy.HighsModelStatus.kUnboundedOrInfeasible):
            # bounds are finite, so "unbounded or infeasible" can only be infeasible
            if st == highspy.HighsModelStatus.kUnboundedOrInfeasible:
                return "infeasible"
            raise UnboundedRelaxation("LP relaxation is unbounded; a variable is missing bounds")
        return None
