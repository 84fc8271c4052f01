"""Loss functions and the Adam training loop for proxy models."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import Dataset, SolutionRecord
from .problems import Markowitz, PenalizedProblem, get_problem, penalized_objective
from .proxy import (
    LOSS_MODES,
    PortfolioProjection,
    ProxyModel,
    forward,
    init_model,
    input_jacobian,
    loss_and_gradient,
    make_batch,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss_mode: str = "sobolev"
    lambda_weight: float = 0.30
    epochs: int = 100
    batch_size: int = 32
    hidden: tuple[int, ...] = (16,)
    activation: str = "tanh"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    penalty_beta: float = 100.0
    penalty_gamma: float = 100.0
    projection: bool = False
    val_every: int = 1

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    value_term: list[float] = field(default_factory=list)
    jac_term: list[float] = field(default_factory=list)
    val_epochs: list[int] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    lambda_weight: float = 0.0
    wall_time: float = 0.0
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        # wall time is left out so reports are reproducible byte for byte
        return {
            "lambda_weight": self.lambda_weight,
            "loss": self.loss,
            "value_term": self.value_term,
            "jac_term": self.jac_term,
            "val_epochs": self.val_epochs,
            "val_mse": self.val_mse,
            "warnings": self.warnings,
        }

    def to_csv(self) -> str:
        val = dict(zip(self.val_epochs, self.val_mse))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "value_term", "jac_term", "val_mse"])
        for k, (a, b, c) in enumerate(zip(self.loss, self.value_term, self.jac_term), start=1):
            w.writerow([k, repr(a), repr(b), repr(c), repr(val[k]) if k in val else ""])
        return buf.getvalue()


# -- single-record losses ----------------------------------------------------

def value_loss(model: ProxyModel, record: SolutionRecord) -> float:
    r = forward(model, record.p) - record.x_star
    return float(r @ r) / r.size


def jacobian_term(model: ProxyModel, record: SolutionRecord) -> float:
    if not record.jac_entries:
        return 0.0
    J = input_jacobian(model, record.p)
    return float(np.mean([(J[r, c] - v) ** 2 for r, c, v in record.jac_entries]))


def sobolev_loss(model: ProxyModel, record: SolutionRecord, lambda_weight: float) -> float:
    """Value loss plus the masked Jacobian mismatch; degenerate records add nothing."""
    if lambda_weight == 0 or not record.jac_entries:
        return value_loss(model, record)
    return value_loss(model, record) + lambda_weight * jacobian_term(model, record)


def selfsup_loss(model: ProxyModel, pen: PenalizedProblem, p) -> float:
    return float(penalized_objective(pen, forward(model, np.asarray(p, dtype=float)), p))


def selfsup_sobolev_loss(model: ProxyModel, record: SolutionRecord, pen: PenalizedProblem, lambda_weight: float) -> float:
    base = selfsup_loss(model, pen, record.p)
    if lambda_weight == 0 or not record.jac_entries:
        return base
    return base + lambda_weight * jacobian_term(model, record)


# -- optimiser ------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def build_model(dataset: Dataset, config: TrainConfig, problem=None) -> ProxyModel:
    proj = None
    if config.projection:
        problem = problem or get_problem(dataset.problem_name)
        if not isinstance(problem, Markowitz):
            raise ValueError("the projection head is only defined for Markowitz problems")
        proj = PortfolioProjection(problem.sigma_half, problem.budget)
    return init_model(dataset.d, config.hidden, dataset.n, config.activation, seed=config.seed, projection=proj)


def dataset_mse(model: ProxyModel, records) -> float:
    if not records:
        return float("nan")
    P = np.array([r.p for r in records])
    X = np.array([r.x_star for r in records])
    R = forward(model, P) - X
    return float(np.mean(np.sum(R * R, axis=1) / X.shape[1]))


def train(dataset: Dataset, config: TrainConfig, validation: Dataset | None = None, problem=None, model: ProxyModel | None = None):
    """Fit a proxy with Adam; returns (model, report)."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    start = time.perf_counter()
    model = model.copy() if model is not None else build_model(dataset, config, problem)
    pen = None
    if config.loss_mode.startswith("selfsup"):
        problem = problem or get_problem(dataset.problem_name)
        pen = PenalizedProblem(problem, config.penalty_beta, config.penalty_gamma)

    batch_all = make_batch(dataset.records, dataset.n, dataset.d)
    opt = Adam(model.params(), config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng([config.seed, 1])
    report = TrainReport(lambda_weight=config.lambda_weight)
    N = len(dataset)
    lam = config.lambda_weight if config.loss_mode in ("sobolev", "selfsup_sobolev") else 0.0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(N)
        tot = val_sum = jac_sum = 0.0
        for k in range(0, N, config.batch_size):
            idx = order[k : k + config.batch_size]
            res = loss_and_gradient(model, batch_all.subset(idx), lam, config.loss_mode, pen)
            if res.warning and res.warning not in report.warnings:
                report.warnings.append(res.warning)
            if not np.isfinite(res.loss) or not all(np.all(np.isfinite(g)) for g in res.grad):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {k}")
            opt.step(res.grad)
            w = len(idx)
            tot += w * res.loss
            val_sum += w * res.value_term
            jac_sum += w * res.jac_term
        report.loss.append(tot / N)
        report.value_term.append(val_sum / N)
        report.jac_term.append(jac_sum / N)
        if validation is not None and len(validation) and config.val_every > 0 and epoch % config.val_every == 0:
            report.val_epochs.append(epoch)
            report.val_mse.append(dataset_mse(model, validation.records))
    report.wall_time = time.perf_counter() - start
    return model, report
