"""Parametric problem definitions.

Every problem has the form

    min_x f(x; p)  s.t.  cE(x; p) = 0,  cI(x; p) <= 0,  lb <= x <= ub

with parameters p drawn from a box [p_lo, p_hi]. Subclasses implement
``objective``, ``eq_constraints`` and ``general_ineq`` using arithmetic and
the primitives in :mod:`sobolev_proxy.autodiff`, so the same code path
evaluates floats, duals and hyper-duals. Finite variable bounds are folded
into the inequality vector returned by :meth:`ParametricProblem.ineq`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class DimensionError(ValueError):
    pass


class ParametricProblem:
    name: str = "problem"

    def __init__(self, n: int, d: int, lb, ub, p_lo, p_hi, p_ref=None):
        self.n = int(n)
        self.d = int(d)
        self.lb = np.broadcast_to(np.asarray(lb, dtype=float), (self.n,)).copy()
        self.ub = np.broadcast_to(np.asarray(ub, dtype=float), (self.n,)).copy()
        self.p_lo = np.asarray(p_lo, dtype=float).reshape(self.d)
        self.p_hi = np.asarray(p_hi, dtype=float).reshape(self.d)
        if np.any(self.p_lo >= self.p_hi):
            raise ValueError("parameter box needs p_lo < p_hi componentwise")
        self.p_ref = None if p_ref is None else np.asarray(p_ref, dtype=float).reshape(self.d)
        self._lb_idx = np.flatnonzero(np.isfinite(self.lb))
        self._ub_idx = np.flatnonzero(np.isfinite(self.ub))

    # -- to be provided by subclasses -------------------------------------
    def objective(self, x, p):
        raise NotImplementedError

    def eq_constraints(self, x, p) -> list:
        return []

    def general_ineq(self, x, p) -> list:
        return []

    # -- derived ----------------------------------------------------------
    @property
    def m_eq(self) -> int:
        return len(self.eq_constraints(np.zeros(self.n), self.reference_parameter()))

    @property
    def m_general(self) -> int:
        return len(self.general_ineq(np.zeros(self.n), self.reference_parameter()))

    @property
    def m_ineq(self) -> int:
        return self.m_general + self._lb_idx.size + self._ub_idx.size

    def bound_rows(self, x) -> list:
        rows = [self.lb[i] - x[i] for i in self._lb_idx]
        rows += [x[i] - self.ub[i] for i in self._ub_idx]
        return rows

    def ineq(self, x, p) -> list:
        """General inequalities followed by folded bounds, all in <= 0 form."""
        return list(self.general_ineq(x, p)) + self.bound_rows(x)

    def reference_parameter(self) -> np.ndarray:
        if self.p_ref is not None:
            return self.p_ref
        return 0.5 * (self.p_lo + self.p_hi)

    def initial_point(self, p=None) -> np.ndarray:
        """Midpoint of finite bounds; 0 (clipped into the bounds) otherwise."""
        both = np.isfinite(self.lb) & np.isfinite(self.ub)
        x0 = np.clip(np.zeros(self.n), self.lb, self.ub)
        x0[both] = 0.5 * (self.lb[both] + self.ub[both])
        return x0

    def check_dims(self, x, p) -> None:
        if len(x) != self.n:
            raise DimensionError(f"{self.name}: x has length {len(x)}, expected {self.n}")
        if len(p) != self.d:
            raise DimensionError(f"{self.name}: p has length {len(p)}, expected {self.d}")

    def evaluate(self, x, p):
        """Return (objective, equality residuals, inequality values) as floats."""
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        self.check_dims(x, p)
        return (
            float(self.objective(x, p)),
            np.asarray(self.eq_constraints(x, p), dtype=float).reshape(-1),
            np.asarray(self.ineq(x, p), dtype=float).reshape(-1),
        )


class ToyQP(ParametricProblem):
    """min 1/2 ||x - p||^2 subject to x >= 0, so that x*(p) = max(p, 0)."""

    def __init__(self, n: int = 1, p_lo=1.0, p_hi=2.0):
        lo = np.full(n, p_lo, dtype=float)
        hi = np.full(n, p_hi, dtype=float)
        super().__init__(n, n, lb=0.0, ub=np.inf, p_lo=lo, p_hi=hi)
        self.name = "toy-qp" if n == 1 else f"toy-qp-{n}"

    def objective(self, x, p):
        r = np.asarray(x, dtype=object) - np.asarray(p, dtype=object)
        return 0.5 * ad.dot(r, r)


class EqualityQP(ParametricProblem):
    """min 1/2 ||x||^2 s.t. p - a^T x = 0 (a = ones by default), x free.

    Closed form: x* = p a / ||a||^2 with multiplier p / ||a||^2.
    """

    name = "eq-qp"

    def __init__(self, a=(1.0, 1.0), p_lo=0.5, p_hi=2.0):
        self.a = np.asarray(a, dtype=float)
        super().__init__(self.a.size, 1, lb=-np.inf, ub=np.inf, p_lo=[p_lo], p_hi=[p_hi])

    def objective(self, x, p):
        return 0.5 * ad.dot(x, x)

    def eq_constraints(self, x, p):
        return [p[0] - ad.dot(self.a, x)]


class Markowitz(ParametricProblem):
    """Return maximisation under a standard-deviation budget.

    min -mu^T x  s.t.  x^T Sigma x <= sigma_max^2,  1^T x <= B,  x >= 0,
    with parameters p = (mu_1, ..., mu_n, sigma_max).
    """

    def __init__(
        self,
        sigma,
        budget: float = 1.0,
        mu_box=(0.02, 0.20),
        sigma_box=(0.05, 0.40),
        name: str | None = None,
    ):
        sigma = np.asarray(sigma, dtype=float)
        n = sigma.shape[0]
        if budget <= 0:
            raise ValueError("budget must be positive")
        self.sigma = sigma
        self.sigma_half = np.linalg.cholesky(sigma)
        self.budget = float(budget)
        mu_lo = np.broadcast_to(np.asarray(mu_box[0], dtype=float), (n,))
        mu_hi = np.broadcast_to(np.asarray(mu_box[1], dtype=float), (n,))
        super().__init__(
            n,
            n + 1,
            lb=0.0,
            ub=np.inf,
            p_lo=np.append(mu_lo, sigma_box[0]),
            p_hi=np.append(mu_hi, sigma_box[1]),
        )
        self.name = name or f"markowitz-{n}"

    @staticmethod
    def split(p):
        return p[:-1], p[-1]

    def objective(self, x, p):
        mu, _ = self.split(p)
        return -ad.dot(mu, x)

    def variance(self, x):
        return ad.dot(x, np.asarray(self.sigma @ np.asarray(x, dtype=object)))

    def general_ineq(self, x, p):
        _, smax = self.split(p)
        total = 0.0
        for xi in x:
            total = total + xi
        return [self.variance(x) - smax * smax, total - self.budget]

    def risk_soc(self, x) -> float:
        """Portfolio standard deviation ||SigmaHalf^T x|| (Sigma = L L^T)."""
        return float(np.linalg.norm(self.sigma_half.T @ np.asarray(x, dtype=float)))

    def initial_point(self, p=None):
        # strictly inside the budget so every slack starts positive
        return np.full(self.n, 0.5 * self.budget / self.n)


def random_covariance(n: int, seed: int = 0) -> np.ndarray:
    """Deterministic well-conditioned covariance with volatilities ~10-30%."""
    rng = np.random.default_rng(seed)
    vols = rng.uniform(0.10, 0.30, size=n)
    a = rng.normal(size=(n, n))
    corr = a @ a.T / n + np.eye(n)
    dinv = 1.0 / np.sqrt(np.diag(corr))
    corr = corr * np.outer(dinv, dinv)
    corr = 0.5 * corr + 0.5 * np.eye(n)
    return corr * np.outer(vols, vols)


@dataclass(frozen=True)
class Branch:
    i: int
    j: int
    y: complex  # series admittance
    yc_from: complex  # shunt admittance at the from end
    yc_to: complex
    rate: float  # thermal limit on |S| (p.u.)


def _branch(i, j, r, x, charging, rate):
    return Branch(i, j, 1.0 / complex(r, x), complex(0.0, charging / 2), complex(0.0, charging / 2), rate)


def branch_flow(br: Branch, vm_i, vm_j, va_i, va_j):
    """Complex power leaving bus i toward j, as a (real, imag) pair.

    S_ij = (Y + Yc_ij)^* |V_i|^2 - Y^* V_i V_j^*; arguments may be dual numbers.
    """
    g, b = br.y.real, br.y.imag
    gc, bc = br.yc_from.real, br.yc_from.imag
    dth = va_i - va_j
    c, s = ad.cos(dth), ad.sin(dth)
    vv = vm_i * vm_j
    re = (g + gc) * vm_i * vm_i - vv * (g * c + b * s)
    im = -(b + bc) * vm_i * vm_i - vv * (g * s - b * c)
    return re, im


def _reverse(br: Branch) -> Branch:
    return Branch(br.j, br.i, br.y, br.yc_to, br.yc_from, br.rate)


def acopf_flows(instance: "AcOpf3Bus", vm, va):
    """Flows on every branch in both directions.

    Returns two lists of (real, imag) pairs: from-end flows S_ij and to-end
    flows S_ji.
    """
    if len(vm) != instance.nbus or len(va) != instance.nbus:
        raise DimensionError("vm/va length must equal the number of buses")
    s_from, s_to = [], []
    for br in instance.branches:
        s_from.append(branch_flow(br, vm[br.i], vm[br.j], va[br.i], va[br.j]))
        s_to.append(branch_flow(_reverse(br), vm[br.j], vm[br.i], va[br.j], va[br.i]))
    return s_from, s_to


class AcOpf3Bus(ParametricProblem):
    """Three-bus AC optimal power flow in polar voltage coordinates.

    Bus 0 is the slack (generator 0), bus 1 a PV bus (generator 1), bus 2 a
    PQ load bus. Variables are laid out as [vm(3), va(3), pg(2), qg(2)] and
    the parameters are the per-bus demands [pd(3), qd(3)], all in p.u.
    """

    name = "acopf3"
    nbus = 3
    gen_bus = (0, 1)
    branches = (
        _branch(0, 1, 0.010, 0.080, 0.020, 1.5),
        _branch(0, 2, 0.020, 0.150, 0.020, 1.5),
        _branch(1, 2, 0.015, 0.120, 0.020, 1.5),
    )
    cost_c2 = (10.0, 15.0)
    cost_c1 = (20.0, 15.0)
    pd_ref = (0.30, 0.40, 0.80)
    qd_ref = (0.10, 0.15, 0.30)
    load_range = (0.8, 1.2)

    def __init__(self):
        ref = np.array(self.pd_ref + self.qd_ref)
        vm_lo, vm_hi = 0.94, 1.06
        lb = [vm_lo] * 3 + [-np.inf] * 3 + [0.0, 0.0] + [-1.0, -1.0]
        ub = [vm_hi] * 3 + [np.inf] * 3 + [2.0, 1.5] + [1.0, 1.0]
        super().__init__(
            10,
            6,
            lb=lb,
            ub=ub,
            p_lo=self.load_range[0] * ref,
            p_hi=self.load_range[1] * ref,
            p_ref=ref,
        )

    @staticmethod
    def unpack(x):
        return x[0:3], x[3:6], x[6:8], x[8:10]

    def objective(self, x, p):
        _, _, pg, _ = self.unpack(x)
        total = 0.0
        for k in range(2):
            total = total + self.cost_c2[k] * pg[k] * pg[k] + self.cost_c1[k] * pg[k]
        return total

    def eq_constraints(self, x, p):
        vm, va, pg, qg = self.unpack(x)
        pd, qd = p[0:3], p[3:6]
        s_from, s_to = acopf_flows(self, vm, va)
        p_out = [0.0] * self.nbus
        q_out = [0.0] * self.nbus
        for br, (fr, fi), (tr, ti) in zip(self.branches, s_from, s_to):
            p_out[br.i] = p_out[br.i] + fr
            q_out[br.i] = q_out[br.i] + fi
            p_out[br.j] = p_out[br.j] + tr
            q_out[br.j] = q_out[br.j] + ti
        p_gen = [0.0] * self.nbus
        q_gen = [0.0] * self.nbus
        for k, bus in enumerate(self.gen_bus):
            p_gen[bus] = pg[k]
            q_gen[bus] = qg[k]
        res = [p_gen[i] - pd[i] - p_out[i] for i in range(self.nbus)]
        res += [q_gen[i] - qd[i] - q_out[i] for i in range(self.nbus)]
        res.append(va[0])
        return res

    def general_ineq(self, x, p):
        vm, va, _, _ = self.unpack(x)
        s_from, s_to = acopf_flows(self, vm, va)
        rows = []
        for br, (fr, fi), (tr, ti) in zip(self.branches, s_from, s_to):
            rows.append(fr * fr + fi * fi - br.rate**2)
            rows.append(tr * tr + ti * ti - br.rate**2)
        return rows

    def total_demand(self, p) -> float:
        return float(np.sum(p[0:3]))


class PenalizedProblem:
    """Penalty reformulation used as a label-free training signal.

    f(x;p) + beta*||cE||^2 + beta*sum(max(cI,0)^2) + gamma*(bound violation),
    where cI are the general inequalities and the bound term sums
    max(lb - x, 0) + max(x - ub, 0).
    """

    def __init__(self, base: ParametricProblem, beta: float = 100.0, gamma: float = 100.0):
        if beta < 0 or gamma < 0:
            raise ValueError("penalty weights must be non-negative")
        self.base = base
        self.beta = float(beta)
        self.gamma = float(gamma)

    def __call__(self, x, p):
        return penalized_objective(self, x, p)


def penalized_objective(pen: PenalizedProblem, x, p):
    base = pen.base
    base.check_dims(x, p)
    val = base.objective(x, p)
    for c in base.eq_constraints(x, p):
        val = val + pen.beta * c * c
    for c in base.general_ineq(x, p):
        v = ad.maximum(c, 0.0)
        val = val + pen.beta * v * v
    for i in base._lb_idx:
        val = val + pen.gamma * ad.maximum(base.lb[i] - x[i], 0.0)
    for i in base._ub_idx:
        val = val + pen.gamma * ad.maximum(x[i] - base.ub[i], 0.0)
    return val


_NAMED = re.compile(r"^(toy-qp|markowitz)(?:-(\d+))?$")


def get_problem(name: str) -> ParametricProblem:
    """Problem by CLI name: toy-qp[-N], markowitz-N, acopf3, eq-qp."""
    if name == "acopf3":
        return AcOpf3Bus()
    if name == "eq-qp":
        return EqualityQP()
    m = _NAMED.match(name)
    if m is None:
        raise ValueError(f"unknown problem {name!r}")
    kind, size = m.group(1), m.group(2)
    if kind == "toy-qp":
        return ToyQP(int(size) if size else 1)
    if size is None:
        raise ValueError("markowitz needs an asset count, e.g. markowitz-5")
    n = int(size)
    return Markowitz(random_covariance(n, seed=n), name=name)
