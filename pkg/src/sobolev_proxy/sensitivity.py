"""Parametric sensitivities of a solved problem by differentiating its KKT system.

With the active inequalities treated as equalities, the optimality system

    F(s, p) = [grad_x L(x, lam; p); cE(x; p); cA(x; p)] = 0,  s = (x, lam)

is differentiated at the solution, and ds/dp = -(dF/ds)^{-1} dF/dp. Points
where strict complementarity, LICQ or second-order sufficiency fail are
flagged and no Jacobian is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import autodiff as ad
from .problems import ParametricProblem
from .solver import SolverResult

REGULAR = "regular"
DEGENERATE = "degenerate_complementarity"
LICQ_VIOLATED = "licq_violated"
SOSC_INDEFINITE = "sosc_indefinite"


@dataclass
class SensitivityResult:
    status: str
    dx_dp: np.ndarray | None = None
    # one row per equality, then one per inequality (zero rows when inactive)
    dlambda_dp: np.ndarray | None = None
    active_set: list[int] = field(default_factory=list)
    m_eq: int = 0

    @property
    def regular(self) -> bool:
        return self.status == REGULAR

    @property
    def dlambda_active(self) -> np.ndarray | None:
        """Rows for the equalities followed by the active inequalities only."""
        if self.dlambda_dp is None:
            return None
        rows = list(range(self.m_eq)) + [self.m_eq + i for i in self.active_set]
        return self.dlambda_dp[rows]


def _split_xp(problem: ParametricProblem, fn):
    n = problem.n

    def wrapped(z):
        return fn(z[:n], z[n:])

    return wrapped


def kkt_sensitivity(
    problem: ParametricProblem,
    p,
    result: SolverResult,
    act_tol: float = 1e-6,
    sc_tol: float = 1e-6,
    rank_tol: float = 1e-8,
    curv_tol: float = 1e-8,
) -> SensitivityResult:
    if not result.converged:
        raise ValueError(f"sensitivities need a converged solve, got status {result.status!r}")
    p = np.asarray(p, dtype=float)
    x = np.asarray(result.x_star, dtype=float)
    n, d = problem.n, problem.d
    _, cE, cI = problem.evaluate(x, p)
    mE, mI = cE.size, cI.size
    z_ineq = np.asarray(result.lambda_ineq, dtype=float)

    active = np.flatnonzero(np.abs(cI) <= act_tol)
    inactive = np.setdiff1d(np.arange(mI), active)
    base = SensitivityResult(status=REGULAR, active_set=[int(i) for i in active], m_eq=mE)

    # active with a vanishing multiplier, or inactive yet still carrying one
    if np.any(z_ineq[active] < sc_tol) or np.any(z_ineq[inactive] >= sc_tol):
        base.status = DEGENERATE
        return base

    y = np.asarray(result.lambda_eq, dtype=float)
    zA = z_ineq[active]
    xp = np.concatenate([x, p])

    def lagrangian(xx, pp):
        val = problem.objective(xx, pp)
        for yi, c in zip(y, problem.eq_constraints(xx, pp)):
            val = val + yi * c
        cIv = problem.ineq(xx, pp)
        for zi, i in zip(zA, active):
            val = val + zi * cIv[i]
        return val

    def constraints(xx, pp):
        cIv = problem.ineq(xx, pp)
        return list(problem.eq_constraints(xx, pp)) + [cIv[i] for i in active]

    H = ad.hessian(_split_xp(problem, lagrangian), xp)
    Hxx, Hxp = H[:n, :n], H[:n, n:]
    Jc = ad.jacobian(_split_xp(problem, constraints), xp)
    A, B = Jc[:, :n], Jc[:, n:]
    m = A.shape[0]

    null = np.eye(n)
    if m:
        _, sv, vt = np.linalg.svd(A)
        rank = int(np.sum(sv > rank_tol * sv[0])) if sv.size and sv[0] > 0 else 0
        if rank < m:
            base.status = LICQ_VIOLATED
            return base
        null = vt[rank:].T
    if null.shape[1]:
        reduced = null.T @ Hxx @ null
        if np.min(np.linalg.eigvalsh(0.5 * (reduced + reduced.T))) <= curv_tol:
            base.status = SOSC_INDEFINITE
            return base

    K = np.zeros((n + m, n + m))
    K[:n, :n] = Hxx
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.vstack([Hxp, B])
    lu = sla.lu_factor(K)
    sol = -sla.lu_solve(lu, rhs)

    dlam = np.zeros((mE + mI, d))
    dlam[:mE] = sol[n : n + mE]
    dlam[mE + active] = sol[n + mE :]
    base.dx_dp = sol[:n]
    base.dlambda_dp = dlam
    return base
