"""Thin wrapper around scipy's HiGHS linear programming backend.

Keeps a uniform error policy: clean answers (optimal / infeasible /
unbounded) are returned to the caller, genuine solver breakdowns raise
``SolverError`` so they are never mistaken for a model-level verdict.
"""

from __future__ import annotations

from scipy.optimize import linprog

OPTIMAL = 0
INFEASIBLE = 2
UNBOUNDED = 3

_CLEAN_STATUSES = (OPTIMAL, INFEASIBLE, UNBOUNDED)


class SolverError(RuntimeError):
    """The LP backend failed numerically or hit an iteration limit."""


def solve(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None):
    """Solve min c.x subject to A_ub x <= b_ub, A_eq x = b_eq.

    Returns the scipy result object; ``result.status`` is one of OPTIMAL,
    INFEASIBLE, UNBOUNDED. Anything else raises SolverError.
    """
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs")
    if res.status not in _CLEAN_STATUSES:
        raise SolverError(f"LP backend failure (status {res.status}): {res.message}")
    return res
