"""Primal-dual interior-point solver for :class:`ParametricProblem`.

Inequalities cI(x) <= 0 are turned into cI(x) + s = 0 with slacks s > 0
kept positive by a log barrier. Each iteration takes a damped Newton step
on the perturbed KKT system

    grad f + JE^T y + JI^T z = 0,  cE = 0,  cI + s = 0,  S z = mu e

solved as one dense LU factorisation of the full (x, s, y, z) matrix. The
barrier parameter shrinks monotonically once the barrier problem is solved
to within 10 mu. Steps are clipped by a fraction-to-boundary rule and
globalised with a backtracking line search on an l1 barrier merit function.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import autodiff as ad
from .problems import ParametricProblem

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max_iter"
NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 200
    mu0: float = 0.1
    mu_shrink: float = 0.2
    frac_to_boundary: float = 0.995
    armijo: float = 1e-4
    backtrack: float = 0.5
    reg0: float = 1e-8
    reg_max: float = 1e8


@dataclass
class SolverResult:
    x_star: np.ndarray
    lambda_eq: np.ndarray
    lambda_ineq: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    status: str
    slack: np.ndarray = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def to_text(self) -> str:
        fmt = lambda v: ",".join(f"{u:.17g}" for u in np.asarray(v, dtype=float))
        lines = [
            f"status: {self.status}",
            f"iterations: {self.iterations}",
            f"objective: {self.objective:.17g}",
            f"kkt_residual: {self.kkt_residual:.6e}",
            f"x_star: {fmt(self.x_star)}",
            f"lambda_eq: {fmt(self.lambda_eq)}",
            f"lambda_ineq: {fmt(self.lambda_ineq)}",
        ]
        return "\n".join(lines) + "\n"


def first_order(problem: ParametricProblem, x, p):
    """Values and first derivatives of f, cE, cI at x from dual passes."""
    n = problem.n
    xs = ad._seed_dual(np.asarray(x, dtype=float))

    def split(vals):
        if len(vals) == 0:
            return np.zeros(0), np.zeros((0, n))
        v = np.array([ad.value_of(u) for u in vals], dtype=float)
        J = np.array([ad._deriv_or_zero(u, n) for u in vals])
        return v, J

    fv = problem.objective(xs, p)
    f = ad.value_of(fv)
    g = ad._deriv_or_zero(fv, n).copy()
    cE, JE = split(problem.eq_constraints(xs, p))
    cI, JI = split(problem.ineq(xs, p))
    return float(f), g, cE, JE, cI, JI


def lagrangian_hessian(problem: ParametricProblem, x, p, y, z) -> np.ndarray:
    def lag(xx):
        val = problem.objective(xx, p)
        for yi, c in zip(y, problem.eq_constraints(xx, p)):
            if yi != 0.0:
                val = val + yi * c
        for zi, c in zip(z, problem.ineq(xx, p)):
            if zi != 0.0:
                val = val + zi * c
        return val

    return ad.hessian(lag, x)


def kkt_residual(problem: ParametricProblem, p, x, lam_eq, lam_ineq) -> float:
    """Infinity norm of stationarity, primal feasibility and complementarity."""
    _, g, cE, JE, cI, JI = first_order(problem, x, p)
    stat = g + JE.T @ lam_eq + JI.T @ lam_ineq
    parts = [
        np.max(np.abs(stat), initial=0.0),
        np.max(np.abs(cE), initial=0.0),
        np.max(np.maximum(cI, 0.0), initial=0.0),
        np.max(np.abs(lam_ineq * cI), initial=0.0),
        np.max(np.maximum(-lam_ineq, 0.0), initial=0.0),
    ]
    return float(max(parts))


def _max_step(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def solve(problem: ParametricProblem, p, options: SolverOptions | None = None, x0=None, **overrides) -> SolverResult:
    opt = options or SolverOptions()
    if overrides:
        opt = SolverOptions(**{**opt.__dict__, **overrides})
    p = np.asarray(p, dtype=float)
    x = problem.initial_point(p) if x0 is None else np.array(x0, dtype=float)
    problem.check_dims(x, p)
    n = problem.n

    f, g, cE, JE, cI, JI = first_order(problem, x, p)
    mE, mI = cE.size, cI.size
    s = np.maximum(-cI, 1e-2)
    y = np.full(mE, 1e-2)
    z = np.full(mI, 1e-2)
    mu = opt.mu0
    mu_min = opt.tol / 10.0
    nu = 1.0  # merit penalty weight
    status = MAX_ITER
    it = 0
    tiny_steps = 0

    def merit(fv, cEv, cIv, sv, weight):
        return fv - mu * np.sum(np.log(sv)) + weight * (np.sum(np.abs(cEv)) + np.sum(np.abs(cIv + sv)))

    N = n + 2 * mI + mE
    ix = slice(0, n)
    is_ = slice(n, n + mI)
    iy = slice(n + mI, n + mI + mE)
    iz = slice(n + mI + mE, N)

    for it in range(opt.max_iter + 1):
        r_d = g + JE.T @ y + JI.T @ z
        err0 = max(
            np.max(np.abs(r_d), initial=0.0),
            np.max(np.abs(cE), initial=0.0),
            np.max(np.maximum(cI, 0.0), initial=0.0),
            np.max(np.abs(z * cI), initial=0.0),
        )
        if err0 <= opt.tol:
            status = CONVERGED
            break
        if it == opt.max_iter:
            break

        def err_mu(m):
            return max(
                np.max(np.abs(r_d), initial=0.0),
                np.max(np.abs(cE), initial=0.0),
                np.max(np.abs(cI + s), initial=0.0),
                np.max(np.abs(s * z - m), initial=0.0),
            )

        while mu > mu_min and err_mu(mu) <= 10.0 * mu:
            mu = max(opt.mu_shrink * mu, mu_min)

        H = lagrangian_hessian(problem, x, p, y, z)
        # row blocks: stationarity, complementarity, equalities, slack feasibility
        rhs = -np.concatenate([r_d, s * z - mu, cE, cI + s])

        delta = 0.0
        step = None
        while True:
            K = np.zeros((N, N))
            K[ix, ix] = H + delta * np.eye(n)
            K[ix, iy] = JE.T
            K[ix, iz] = JI.T
            # complementarity row: Z ds + S dz = -(S z - mu)
            K[is_, is_] = np.diag(z)
            K[is_, iz] = np.diag(s)
            K[iy, ix] = JE
            K[iy, iy] = -delta * np.eye(mE)
            K[iz, ix] = JI
            K[iz, is_] = np.eye(mI)
            try:
                with np.errstate(all="ignore"):
                    lu = sla.lu_factor(K, check_finite=True)
                    if np.any(np.abs(np.diag(lu[0])) < 1e-300):
                        raise np.linalg.LinAlgError("singular KKT matrix")
                    sol = sla.lu_solve(lu, rhs)
                if not np.all(np.isfinite(sol)):
                    raise np.linalg.LinAlgError("non-finite Newton step")
            except (np.linalg.LinAlgError, ValueError):
                delta = opt.reg0 if delta == 0.0 else 10.0 * delta
                if delta > opt.reg_max:
                    break
                continue
            dx, ds = sol[ix], sol[is_]
            curv = dx @ (H + delta * np.eye(n)) @ dx + ds @ (z / s * ds)
            if curv < -1e-12 * max(1.0, dx @ dx):
                # negative curvature: convexify the Hessian block
                delta = max(1e-4, 10.0 * delta)
                if delta > opt.reg_max:
                    break
                continue
            step = sol
            break

        if step is None:
            status = NUMERICAL_FAILURE
            log.debug("Newton system singular after regularisation at iteration %d", it)
            break

        dx, ds, dy, dz = step[ix], step[is_], step[iy], step[iz]
        tau = max(opt.frac_to_boundary, 1.0 - mu)
        a_s = _max_step(s, ds, tau)
        a_z = _max_step(z, dz, tau)

        cnorm = np.sum(np.abs(cE)) + np.sum(np.abs(cI + s))
        dphi_bar = g @ dx - mu * np.sum(ds / s)
        if cnorm > 1e-14:
            nu_trial = (dphi_bar + 0.5 * max(curv, 0.0)) / (0.9 * cnorm)
            if nu_trial > nu:
                nu = nu_trial + 1.0
        dphi = dphi_bar - nu * cnorm
        phi0 = merit(f, cE, cI, s, nu)

        alpha = a_s
        while True:
            xt = x + alpha * dx
            st = s + alpha * ds
            try:
                ft, cEt, cIt = problem.evaluate(xt, p)
                phit = merit(ft, cEt, cIt, st, nu)
            except (ValueError, ZeroDivisionError, OverflowError):
                phit = np.inf
            if np.isfinite(phit) and phit <= phi0 + opt.armijo * alpha * min(dphi, 0.0):
                break
            alpha *= opt.backtrack
            if alpha < 1e-14:
                break

        if alpha < 1e-14:
            tiny_steps += 1
            if tiny_steps >= 10:
                status = NUMERICAL_FAILURE
                break
            # accept a minimal step to escape; the barrier update may unblock it
            alpha = 1e-14
        else:
            tiny_steps = 0

        x = x + alpha * dx
        s = s + alpha * ds
        y = y + alpha * dy
        z = z + a_z * dz
        s = np.maximum(s, 1e-300)
        # keep z within a wide band around the central path
        if mI:
            z = np.clip(z, mu / (1e10 * s), 1e10 * mu / s)
        f, g, cE, JE, cI, JI = first_order(problem, x, p)

    res = kkt_residual(problem, p, x, y, z)
    return SolverResult(
        x_star=x,
        lambda_eq=y,
        lambda_ineq=z,
        objective=float(f),
        kkt_residual=res,
        iterations=it,
        status=status,
        slack=s,
    )
