"""Standard-form linear programs: min c'x subject to Ax = b, x >= 0.

Thin, contract-enforcing wrapper around HiGHS dual simplex (via
``scipy.optimize.linprog``). The wrapper pins the method and tolerances so
that repeated solves of the same program are bit-identical, recovers the
equality-constraint dual vector, and checks strong duality at optimality.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

log = logging.getLogger(__name__)


class LpStatusError(RuntimeError):
    """Raised when a caller requires an optimum but the LP has none."""


@dataclass(frozen=True)
class Tolerances:
    feasibility: float = 1e-9
    duality_gap: float = 1e-8
    max_iterations: int = 200_000

    def __post_init__(self) -> None:
        if self.feasibility <= 0 or self.duality_gap <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class StandardFormLP:
    """Equality-form LP data. A is m x n sparse, b is m, c is n."""

    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    variable_names: list[str] | None = None

    def __post_init__(self) -> None:
        self.A = sp.csr_matrix(self.A)
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        m, n = self.A.shape
        if self.b.shape != (m,):
            raise ValueError(f"b has shape {self.b.shape}, expected ({m},)")
        if self.c.shape != (n,):
            raise ValueError(f"c has shape {self.c.shape}, expected ({n},)")
        if self.variable_names is not None and len(self.variable_names) != n:
            raise ValueError("variable_names length must match column count")

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape


@dataclass
class LPSolution:
    status: str  # optimal | infeasible | unbounded | iteration_limit | numerical
    x: np.ndarray | None
    y: np.ndarray | None
    objective: float | None
    dual_objective: float | None
    iterations: int

    @property
    def gap(self) -> float | None:
        if self.objective is None or self.dual_objective is None:
            return None
        return self.objective - self.dual_objective


_STATUS = {
    0: "optimal",
    1: "iteration_limit",
    2: "infeasible",
    3: "unbounded",
    4: "numerical",
}


def solve(lp: StandardFormLP, tolerances: Tolerances = Tolerances()) -> LPSolution:
    """Solve to an optimal basic feasible solution with its dual vector.

    The dual y satisfies A'y <= c and b'y = c'x at optimality; the sign
    convention is "objective change per unit increase of b". Infeasible and
    unbounded programs are reported through ``status``, not raised.
    """
    feas = max(tolerances.feasibility, 1e-10)  # HiGHS floor
    res = linprog(
        lp.c,
        A_eq=lp.A,
        b_eq=lp.b,
        bounds=(0, None),
        method="highs-ds",
        options={
            "maxiter": tolerances.max_iterations,
            "primal_feasibility_tolerance": feas,
            "dual_feasibility_tolerance": feas,
        },
    )
    status = _STATUS.get(res.status, "numerical")
    if status != "optimal":
        log.debug("LP not optimal: %s (%s)", status, res.message)
        return LPSolution(status, None, None, None, None, int(res.nit))
    x = np.asarray(res.x, dtype=float)
    y = np.asarray(res.eqlin.marginals, dtype=float)
    z = float(lp.c @ x)
    z_dual = float(lp.b @ y)
    sol = LPSolution(status, x, y, z, z_dual, int(res.nit))
    scale = max(1.0, abs(z))
    if abs(z - z_dual) > tolerances.duality_gap * scale:
        sol.status = "numerical"
        log.warning("duality gap %.3e exceeds tolerance", z - z_dual)
    return sol


def solve_dual_check(
    lp: StandardFormLP, tolerances: Tolerances = Tolerances()
) -> tuple[float, float, float]:
    """Primal objective, dual objective, and their gap at the optimum."""
    sol = solve(lp, tolerances)
    if sol.status != "optimal":
        raise LpStatusError(f"LP terminated with status {sol.status}")
    return sol.objective, sol.dual_objective, sol.gap


def dump_triplets(lp: StandardFormLP) -> str:
    """Plain-text sparse dump of (A, b, c) for external cross-checking.

    Format: one header line with dimensions, then `a i j value` rows in
    row-major order, then `b i value` and `c j value` rows.
    """
    out = io.StringIO()
    m, n = lp.shape
    coo = lp.A.tocoo()
    order = np.lexsort((coo.col, coo.row))
    out.write(f"lp {m} {n} {coo.nnz}\n")
    for k in order:
        out.write(f"a {coo.row[k]} {coo.col[k]} {coo.data[k]!r}\n")
    for i, v in enumerate(lp.b):
        out.write(f"b {i} {v!r}\n")
    for j, v in enumerate(lp.c):
        out.write(f"c {j} {v!r}\n")
    return out.getvalue()
