"""Fully connected proxy networks with exact input Jacobians.

The network maps parameters p (dim d) to a predicted solution (dim n):

    h_0 = p,  a_l = W_l h_{l-1} + b_l,  h_l = act(a_l),  y = W_L h_{L-1} + b_L

The input Jacobian is propagated forward alongside the activations
(T_l = act'(a_l) * W_l T_{l-1}), and the parameter gradient of a loss that
depends on both y and selected Jacobian entries is obtained by a reverse
sweep through that joint forward computation. The reverse sweep needs the
activation's second derivative, which is where the nested part lives.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _tanh3(a):
    t = np.tanh(a)
    g = 1.0 - t * t
    return t, g, -2.0 * t * g


def _sigmoid3(a):
    s = _sigmoid(a)
    g = s * (1.0 - s)
    return s, g, g * (1.0 - 2.0 * s)


def _softplus3(a):
    s = _sigmoid(a)
    return np.logaddexp(0.0, a), s, s * (1.0 - s)


def _relu3(a):
    pos = a > 0
    return np.where(pos, a, 0.0), pos.astype(float), np.zeros_like(a)


def _leaky3(a, slope=0.01):
    pos = a > 0
    return np.where(pos, a, slope * a), np.where(pos, 1.0, slope), np.zeros_like(a)


ACTIVATIONS = {
    "tanh": _tanh3,
    "sigmoid": _sigmoid3,
    "softplus": _softplus3,
    "relu": _relu3,
    "leaky_relu": _leaky3,
}
SMOOTH_ACTIVATIONS = ("tanh", "sigmoid", "softplus")
LOSS_MODES = ("value", "sobolev", "selfsup", "selfsup_sobolev")


@dataclass
class PortfolioProjection:
    """Clip, budget-scale, then risk-scale a raw portfolio.

    p is (mu_1..mu_n, sigma_max); Sigma = sigma_half @ sigma_half.T.
    """

    sigma_half: np.ndarray
    budget: float = 1.0

    def __call__(self, x_raw, p):
        return project_portfolio(self, x_raw, p)

    def to_json(self) -> dict:
        return {"sigma_half": self.sigma_half.tolist(), "budget": self.budget}


def project_portfolio(head: PortfolioProjection, x_raw, p):
    sigma_max = p[-1]
    x = np.asarray(x_raw)
    if x.dtype != object:
        x = np.maximum(x.astype(float), 0.0)
        total = x.sum()
        if total > head.budget:
            x = x * (head.budget / total)
        risk = np.linalg.norm(head.sigma_half.T @ x)
        if risk > sigma_max:
            x = x * (sigma_max / risk)
        return x
    # dual-number path, used to differentiate losses through the head
    x = ad.maximum(x, 0.0)
    total = ad.dot(np.ones(x.size), x)
    if total > head.budget:
        x = _scaled(x, head.budget / total)
    lx = head.sigma_half.T @ x
    var = ad.dot(lx, lx)
    if var > sigma_max * sigma_max:
        x = _scaled(x, sigma_max / ad.sqrt(var))
    return x


def _scaled(x, factor):
    # elementwise, so a dual factor is not broadcast over the whole array
    return np.array([xi * factor for xi in x], dtype=object)


@dataclass
class ProxyModel:
    widths: list[int]
    activation: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    projection: PortfolioProjection | None = None

    @property
    def d(self) -> int:
        return self.widths[0]

    @property
    def n(self) -> int:
        return self.widths[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.params()])

    def set_flat(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        k = 0
        for a in self.params():
            a[...] = theta[k : k + a.size].reshape(a.shape)
            k += a.size

    def copy(self) -> "ProxyModel":
        return ProxyModel(
            list(self.widths),
            self.activation,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.projection,
        )

    def to_json(self) -> dict:
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "projection": None if self.projection is None else self.projection.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProxyModel":
        proj = obj.get("projection")
        return cls(
            list(obj["widths"]),
            obj["activation"],
            [np.array(W, dtype=float) for W in obj["weights"]],
            [np.array(b, dtype=float) for b in obj["biases"]],
            None if proj is None else PortfolioProjection(np.array(proj["sigma_half"], dtype=float), float(proj["budget"])),
        )


def init_model(d: int, hidden, n: int, activation: str = "tanh", seed: int = 0, projection=None) -> ProxyModel:
    """Glorot-uniform weights, zero biases."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    widths = [int(d)] + [int(h) for h in hidden] + [int(n)]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ProxyModel(widths, activation, weights, biases, projection)


def save_model(model: ProxyModel) -> str:
    return json.dumps(model.to_json())


def load_model(text: str) -> ProxyModel:
    return ProxyModel.from_json(json.loads(text))


def raw_forward(model: ProxyModel, P) -> np.ndarray:
    """Pre-projection output; P may be one point (d,) or a batch (B, d)."""
    act = ACTIVATIONS[model.activation]
    h = np.asarray(P, dtype=float)
    L = len(model.weights)
    for l in range(L - 1):
        h = act(h @ model.weights[l].T + model.biases[l])[0]
    return h @ model.weights[-1].T + model.biases[-1]


def forward(model: ProxyModel, p) -> np.ndarray:
    y = raw_forward(model, p)
    if model.projection is None:
        return y
    if y.ndim == 1:
        return model.projection(y, p)
    return np.array([model.projection(yi, pi) for yi, pi in zip(y, np.asarray(p))])


def _forward_tangent(model: ProxyModel, P, cols):
    """Forward sweep with the Jacobian columns `cols` carried alongside.

    Returns the output y, and per-layer caches for the reverse sweep.
    """
    act = ACTIVATIONS[model.activation]
    B = P.shape[0]
    h = [P]
    a_s, d1s, d2s, Us, Ts = [], [], [], [], []
    T = None
    if cols is not None:
        T = np.broadcast_to(np.eye(model.d)[:, cols], (B, model.d, len(cols)))
    Ts.append(T)
    for l in range(len(model.weights) - 1):
        W, b = model.weights[l], model.biases[l]
        a = h[-1] @ W.T + b
        v, g1, g2 = act(a)
        a_s.append(a)
        d1s.append(g1)
        d2s.append(g2)
        h.append(v)
        if T is not None:
            U = np.einsum("ij,bjc->bic", W, T)
            T = g1[:, :, None] * U
            Us.append(U)
            Ts.append(T)
    y = h[-1] @ model.weights[-1].T + model.biases[-1]
    J = None if T is None else np.einsum("ij,bjc->bic", model.weights[-1], T)
    return y, J, (h, d1s, d2s, Us, Ts)


def input_jacobian(model: ProxyModel, p) -> np.ndarray:
    """d(raw output)/dp as an (n, d) matrix; a batch (B, d) gives (B, n, d)."""
    P = np.asarray(p, dtype=float)
    single = P.ndim == 1
    P = np.atleast_2d(P)
    _, J, _ = _forward_tangent(model, P, np.arange(model.d))
    return J[0] if single else J


@dataclass
class Batch:
    """Dense arrays for a group of records."""

    P: np.ndarray  # (B, d)
    X: np.ndarray  # (B, n)
    M: np.ndarray  # (B, n, d) 0/1 mask, zero for records without sensitivities
    G: np.ndarray  # (B, n, d) target Jacobian entries (0 off-mask)
    counts: np.ndarray  # (B,) kept entries per record
    objective: np.ndarray = field(default=None)

    def __len__(self):
        return self.P.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(
            self.P[idx],
            self.X[idx],
            self.M[idx],
            self.G[idx],
            self.counts[idx],
            None if self.objective is None else self.objective[idx],
        )


def make_batch(records, n: int, d: int) -> Batch:
    B = len(records)
    P = np.zeros((B, d))
    X = np.zeros((B, n))
    M = np.zeros((B, n, d))
    G = np.zeros((B, n, d))
    obj = np.zeros(B)
    for i, rec in enumerate(records):
        P[i] = rec.p
        X[i] = rec.x_star
        obj[i] = rec.objective
        for r, c, v in rec.jac_entries:
            M[i, r, c] = 1.0
            G[i, r, c] = v
    return Batch(P, X, M, G, M.reshape(B, -1).sum(axis=1), obj)


@dataclass
class LossResult:
    loss: float
    value_term: float
    jac_term: float
    grad: list[np.ndarray]
    warning: str | None = None

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grad])


def _value_terms(model: ProxyModel, y, batch: Batch, mode: str, penalized):
    """Per-record value losses and their gradients w.r.t. the raw output y."""
    B, n = y.shape
    if mode in ("value", "sobolev") and model.projection is None:
        r = y - batch.X
        # overflow here surfaces as a non-finite loss for the caller's guard
        with np.errstate(over="ignore", invalid="ignore"):
            return np.sum(r * r, axis=1) / n, 2.0 * r / n
    if mode in ("selfsup", "selfsup_sobolev") and penalized is None:
        raise ValueError("self-supervised modes need a PenalizedProblem")
    vals = np.zeros(B)
    grads = np.zeros_like(y)
    for i in range(B):
        p, target = batch.P[i], batch.X[i]
        if mode in ("value", "sobolev"):

            def f(yy, p=p, target=target):
                out = model.projection(yy, p)
                r = out - target
                return ad.dot(r, r) / n

        else:

            def f(yy, p=p):
                out = yy if model.projection is None else model.projection(yy, p)
                return penalized(out, p)

        yd = ad._seed_dual(y[i])
        v = f(yd)
        vals[i] = ad.value_of(v)
        grads[i] = ad._deriv_or_zero(v, n)
    return vals, grads


def loss_and_gradient(model: ProxyModel, batch: Batch, lambda_weight: float = 0.0, loss_mode: str = "sobolev", penalized=None) -> LossResult:
    """Batch-mean loss and its exact gradient w.r.t. every weight and bias.

    loss = mean_i [ value_i + lambda * mean_{(r,c) in mask_i} (J_i[r,c] - G_i[r,c])^2 ]
    The Jacobian term is skipped entirely for the value-only modes and when
    lambda is zero.
    """
    if loss_mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {loss_mode!r}")
    if lambda_weight < 0:
        raise ValueError("lambda_weight must be non-negative")
    B = len(batch)
    sobolev = loss_mode in ("sobolev", "selfsup_sobolev") and lambda_weight > 0 and np.any(batch.counts > 0)
    warning = None
    if sobolev and model.activation not in SMOOTH_ACTIVATIONS:
        warning = f"{model.activation} has zero second derivative almost everywhere under a Jacobian loss"
        warnings.warn(warning, RuntimeWarning, stacklevel=2)

    cols = None
    if sobolev:
        cols = np.flatnonzero(batch.M.sum(axis=(0, 1)) > 0)
    y, J, (h, d1s, d2s, Us, Ts) = _forward_tangent(model, batch.P, cols)

    vals, ybar = _value_terms(model, y, batch, loss_mode, penalized)
    value_term = float(np.mean(vals))
    ybar = ybar / B

    jac_term = 0.0
    Jbar = None
    if sobolev:
        Mc = batch.M[:, :, cols]
        Gc = batch.G[:, :, cols]
        resid = (J - Gc) * Mc
        inv = np.where(batch.counts > 0, 1.0 / np.maximum(batch.counts, 1), 0.0)
        per_rec = np.sum(resid * resid, axis=(1, 2)) * inv
        jac_term = float(np.mean(per_rec))
        Jbar = (2.0 * lambda_weight / B) * resid * inv[:, None, None]

    L = len(model.weights)
    gW = [None] * L
    gb = [None] * L
    gW[-1] = ybar.T @ h[-1]
    gb[-1] = ybar.sum(axis=0)
    hbar = ybar @ model.weights[-1]
    Tbar = None
    if Jbar is not None:
        gW[-1] = gW[-1] + np.einsum("bnc,bjc->nj", Jbar, Ts[-1])
        Tbar = np.einsum("ni,bnc->bic", model.weights[-1], Jbar)

    for l in range(L - 2, -1, -1):
        g1, g2 = d1s[l], d2s[l]
        abar = g1 * hbar
        if Tbar is not None:
            Ubar = g1[:, :, None] * Tbar
            abar = abar + g2 * np.sum(Tbar * Us[l], axis=2)
        W = model.weights[l]
        gW[l] = abar.T @ h[l]
        gb[l] = abar.sum(axis=0)
        hbar = abar @ W
        if Tbar is not None:
            gW[l] = gW[l] + np.einsum("bic,bjc->ij", Ubar, Ts[l])
            Tbar = np.einsum("ij,bic->bjc", W, Ubar)

    grads = []
    for l in range(L):
        grads += [gW[l], gb[l]]
    loss = value_term + lambda_weight * jac_term if sobolev else value_term
    return LossResult(loss, value_term, jac_term, grads, warning)
