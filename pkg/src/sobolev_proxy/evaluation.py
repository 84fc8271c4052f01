"""Metrics, covering radii, Lipschitz estimates, interpolation bound checks and
the Jacobian-mask ablation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.spatial import cKDTree

from .datagen import Dataset, SolutionRecord
from .problems import DimensionError, ParametricProblem
from .proxy import ProxyModel, forward
from .training import TrainConfig, dataset_mse, train

# -- metrics ------------------------------------------------------------------

def mse(x_tilde, x_star) -> float:
    a = np.asarray(x_tilde, dtype=float).ravel()
    b = np.asarray(x_star, dtype=float).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"prediction has {a.size} entries, target has {b.size}")
    r = a - b
    return float(r @ r) / r.size


def gap(z_tilde: float, z_star: float) -> float | None:
    """Relative optimality gap; None when the reference objective is zero."""
    if z_star == 0:
        return None
    return abs(z_tilde - z_star) / abs(z_star)


def constraint_violations(problem: ParametricProblem, x, p) -> np.ndarray:
    """|cE| followed by max(cI, 0), bounds included in cI."""
    _, cE, cI = problem.evaluate(x, p)
    return np.concatenate([np.abs(cE), np.maximum(cI, 0.0)])


def inf_metric(problem: ParametricProblem, x, p) -> float:
    v = constraint_violations(problem, x, p)
    return float(np.sum(v)) / v.size if v.size else 0.0


def rmi(A, B) -> np.ndarray | None:
    """Per-instance relative reduction of the worst violation, in percent.

    A belongs to the baseline model, B to the model being compared. Returns
    None when every entry of B is zero.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape != B.shape:
        raise DimensionError("violation matrices must have the same shape")
    scale = np.max(B) if B.size else 0.0
    if scale == 0:
        return None
    return 100.0 * (A.max(axis=1) - B.max(axis=1)) / scale


def _summary(values) -> dict:
    v = np.array([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"mean": None, "median": None, "std": None, "count": 0}
    return {"mean": float(v.mean()), "median": float(np.median(v)), "std": float(v.std()), "count": int(v.size)}


@dataclass
class EvalReport:
    mse: list[float] = field(default_factory=list)
    gap: list[float | None] = field(default_factory=list)
    inf: list[float] = field(default_factory=list)
    violations: list[list[float]] = field(default_factory=list)
    rmi: list[float] | None = None
    bounds: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"mse": _summary(self.mse), "gap": _summary(self.gap), "inf": _summary(self.inf)}
        if self.rmi is not None:
            out["rmi"] = _summary(self.rmi)
        return out

    def to_json(self) -> dict:
        out = {"summary": self.summary(), "mse": self.mse, "gap": self.gap, "inf": self.inf}
        if self.rmi is not None:
            out["rmi"] = self.rmi
        if self.bounds:
            out["bounds"] = self.bounds
        return out

    def to_csv(self) -> str:
        rows = [(k, a, "" if b is None else repr(b), c) for k, (a, b, c) in enumerate(zip(self.mse, self.gap, self.inf))]
        return write_csv(["instance", "mse", "gap", "inf"], rows)


def write_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def evaluate_model(model: ProxyModel, dataset: Dataset, problem: ParametricProblem) -> EvalReport:
    rep = EvalReport()
    if not dataset.records:
        return rep
    P = np.array([r.p for r in dataset.records])
    X = forward(model, P)
    for rec, x in zip(dataset.records, X):
        rep.mse.append(mse(x, rec.x_star))
        rep.gap.append(gap(float(problem.objective(x, rec.p)), rec.objective))
        v = constraint_violations(problem, x, rec.p)
        rep.violations.append([float(t) for t in v])
        rep.inf.append(float(np.sum(v)) / v.size if v.size else 0.0)
    return rep


def compare_models(baseline: ProxyModel, candidate: ProxyModel, dataset: Dataset, problem: ParametricProblem):
    """RMI of candidate against baseline, plus both per-instance reports."""
    ra = evaluate_model(baseline, dataset, problem)
    rb = evaluate_model(candidate, dataset, problem)
    r = rmi(ra.violations, rb.violations) if dataset.records else None
    return (None if r is None else [float(v) for v in r]), ra, rb


# -- covering radius and Lipschitz estimates ----------------------------------

def _as_points(pts) -> np.ndarray:
    a = np.asarray(pts, dtype=float)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def covering_radius(points, domain_grid) -> float:
    """Largest distance from a grid point to its nearest training point."""
    P, G = _as_points(points), _as_points(domain_grid)
    if P.size == 0 or G.size == 0:
        raise ValueError("points and grid must be nonempty")
    if P.shape[1] != G.shape[1]:
        raise DimensionError("points and grid differ in dimension")
    dist, _ = cKDTree(P).query(G)
    return float(np.max(dist))


def estimate_lipschitz(f, pairs, vectorized: bool = False) -> float:
    """Max of |f(p) - f(q)| / |p - q| over the given pairs (a lower estimate)."""
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) >= 1 and not np.isscalar(pairs[0]):
        P, Q = _as_points(pairs[0]), _as_points(pairs[1])
    else:
        arr = [(np.atleast_1d(np.asarray(p, float)), np.atleast_1d(np.asarray(q, float))) for p, q in pairs]
        if not arr:
            return 0.0
        P = np.array([a for a, _ in arr])
        Q = np.array([b for _, b in arr])
    if vectorized:
        FP = np.asarray(f(P.squeeze(-1) if P.shape[1] == 1 else P), dtype=float).reshape(len(P), -1)
        FQ = np.asarray(f(Q.squeeze(-1) if Q.shape[1] == 1 else Q), dtype=float).reshape(len(Q), -1)
    else:
        FP = np.array([np.atleast_1d(np.asarray(f(p), float)).ravel() for p in P])
        FQ = np.array([np.atleast_1d(np.asarray(f(q), float)).ravel() for q in Q])
    den = np.linalg.norm(P - Q, axis=1)
    if np.any(den == 0):
        raise ValueError("pairs must have distinct points")
    num = np.linalg.norm(FP - FQ, axis=1)
    return float(np.max(num / den)) if num.size else 0.0


# -- interpolation bound checks -----------------------------------------------

@dataclass
class ReferenceMap:
    f: object
    df: object
    lo: float
    hi: float
    L: float | None = None  # known Lipschitz constant of f, estimated if None
    M: float | None = None  # known Lipschitz constant of f'

    @classmethod
    def sine(cls) -> "ReferenceMap":
        return cls(np.sin, np.cos, 0.0, 2.0 * math.pi, 1.0, 1.0)

    @classmethod
    def affine(cls, a: float = 2.0, b: float = -0.5) -> "ReferenceMap":
        return cls(lambda t: a * np.asarray(t) + b, lambda t: a + 0.0 * np.asarray(t), 0.0, 2.0 * math.pi, abs(a), 0.0)


def _dense_pairs(lo, hi, count, seed=0):
    # short random chords, so local slopes dominate the estimate
    rng = np.random.default_rng(seed)
    p = rng.uniform(lo, hi, count)
    h = (hi - lo) * 10.0 ** rng.uniform(-6, -2, count)
    q = np.clip(p + h, lo, hi)
    q = np.where(q == p, np.clip(p - h, lo, hi), q)
    return p, q


def verify_bounds(
    reference: ReferenceMap | None = None,
    point_counts=(5, 9, 17, 33),
    grid: int = 4096,
    pairs: int = 100_000,
    seed: int = 0,
) -> tuple[list[dict], list[dict]]:
    """Check value, Jacobian and Sobolev interpolation bounds on a 1-D map.

    Returns (bound rows, rate rows). Bound rows hold, per training-set size
    and check, delta, the constants used, the measured sup error on the grid,
    the bound and a pass flag. Rate rows hold the error ratio between
    consecutive sizes for the linear and Hermite interpolants.
    """
    ref = reference or ReferenceMap.sine()
    tt = np.linspace(ref.lo, ref.hi, grid)
    pp, qq = _dense_pairs(ref.lo, ref.hi, pairs, seed)
    L_g = ref.L if ref.L is not None else estimate_lipschitz(ref.f, (pp, qq), vectorized=True)
    M_g = ref.M if ref.M is not None else estimate_lipschitz(ref.df, (pp, qq), vectorized=True)
    rows, errs = [], {"linear": [], "hermite": []}

    for k in point_counts:
        xs = np.linspace(ref.lo, ref.hi, k)
        delta = covering_radius(xs, tt)
        g, dg = ref.f(tt), ref.df(tt)

        lin = lambda t, xs=xs: np.interp(t, xs, ref.f(xs))
        L_hat = estimate_lipschitz(lin, (pp, qq), vectorized=True)
        e_lin = float(np.max(np.abs(lin(tt) - g)))
        b_lin = (L_g + L_hat) * delta
        rows.append(_row("value", k, delta, L_g, L_hat, e_lin, b_lin))

        spl = CubicHermiteSpline(xs, ref.f(xs), ref.df(xs))
        dspl = spl.derivative()
        M_hat = estimate_lipschitz(dspl, (pp, qq), vectorized=True)
        e_her = float(np.max(np.abs(spl(tt) - g)))
        e_jac = float(np.max(np.abs(dspl(tt) - dg)))
        rows.append(_row("jacobian", k, delta, M_g, M_hat, e_jac, (M_g + M_hat) * delta))
        rows.append(_row("sobolev", k, delta, M_g, M_hat, e_her, 0.5 * (M_g + M_hat) * delta**2))
        errs["linear"].append(e_lin)
        errs["hermite"].append(e_her)

    rates = []
    limits = {"linear": (1.6, 2.6), "hermite": (3.0, 5.0)}
    for name, e in errs.items():
        lo, hi = limits[name]
        for a in range(len(e) - 1):
            ratio = e[a] / e[a + 1] if e[a + 1] > 0 else float("inf")
            rates.append(
                {
                    "interpolant": name,
                    "from_points": int(point_counts[a]),
                    "to_points": int(point_counts[a + 1]),
                    "ratio": float(ratio),
                    "lo": lo,
                    "hi": hi,
                    "pass": bool(lo <= ratio <= hi),
                }
            )
    return rows, rates


def _row(check, k, delta, c_ref, c_hat, err, bound):
    return {
        "check": check,
        "points": int(k),
        "delta": float(delta),
        "const_ref": float(c_ref),
        "const_interp": float(c_hat),
        "sup_error": float(err),
        "bound": float(bound),
        "pass": bool(err <= bound),
    }


# -- mask ablation ------------------------------------------------------------

def remask(record: SolutionRecord, n: int, d: int, sparsity: float, seed) -> SolutionRecord:
    """Subsample the stored Jacobian entries down to the given sparsity."""
    if not record.jac_entries:
        return record
    keep = max(1, int(round((1.0 - sparsity) * n * d)))
    if keep > len(record.jac_entries):
        raise ValueError(f"record stores {len(record.jac_entries)} Jacobian entries, {keep} requested")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(record.jac_entries), size=keep, replace=False))
    entries = [record.jac_entries[i] for i in idx]
    mask = type(record.mask)(tuple((r, c) for r, c, _ in entries), float(sparsity))
    return replace(record, jac_entries=entries, mask=mask)


def ablate_mask(train_set: Dataset, test_set: Dataset, sparsities, base_config: TrainConfig, problem=None) -> list[dict]:
    """Retrain once per sparsity from the same seed; rows of (sparsity, kept, mse)."""
    rows = []
    for s in sparsities:
        s = float(s)
        recs = [remask(r, train_set.n, train_set.d, s, [base_config.seed, k, 99]) for k, r in enumerate(train_set.records)]
        ds = replace(train_set, records=recs)
        model, _ = train(ds, base_config, problem=problem)
        rows.append({"sparsity": s, "kept": round(1.0 - s, 12), "mse": dataset_mse(model, test_set.records)})
    return rows
