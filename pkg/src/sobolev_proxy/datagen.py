"""Dataset generation: parameter sampling, offline solves, masked sensitivities.

Files are JSON Lines: a header object ``{"problem", "n", "d", "config"}``
followed by one record per line. Each record carries its own Jacobian mask,
sampled from a random stream derived from (dataset seed, split, index), so
generation is order independent and can run in worker processes.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .problems import ParametricProblem, get_problem
from .sensitivity import REGULAR, kkt_sensitivity
from .solver import SolverOptions, solve

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
_SPLIT_ID = {name: k for k, name in enumerate(SPLITS)}


@dataclass(frozen=True)
class MaskSpec:
    kept_entries: tuple[tuple[int, int], ...]
    sparsity: float

    def as_array(self, n: int, d: int) -> np.ndarray:
        m = np.zeros((n, d), dtype=bool)
        for r, c in self.kept_entries:
            m[r, c] = True
        return m


@dataclass
class SolutionRecord:
    p: np.ndarray
    x_star: np.ndarray
    lam: np.ndarray
    objective: float
    jac_entries: list[tuple[int, int, float]]
    mask: MaskSpec
    regularity: str

    @property
    def regular(self) -> bool:
        return self.regularity == REGULAR

    def to_json(self) -> dict:
        return {
            "p": [float(v) for v in self.p],
            "x": [float(v) for v in self.x_star],
            "lambda": [float(v) for v in self.lam],
            "obj": float(self.objective),
            "mask": [[int(r), int(c)] for r, c in self.mask.kept_entries],
            "sparsity": float(self.mask.sparsity),
            "jac": [[int(r), int(c), float(v)] for r, c, v in self.jac_entries],
            "reg": self.regularity,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SolutionRecord":
        return cls(
            p=np.array(obj["p"], dtype=float),
            x_star=np.array(obj["x"], dtype=float),
            lam=np.array(obj["lambda"], dtype=float),
            objective=float(obj["obj"]),
            jac_entries=[(int(r), int(c), float(v)) for r, c, v in obj["jac"]],
            mask=MaskSpec(tuple((int(r), int(c)) for r, c in obj["mask"]), float(obj.get("sparsity", 0.0))),
            regularity=obj["reg"],
        )


@dataclass
class GenerationConfig:
    seed: int = 0
    proportions: tuple[float, float, float] = (0.8, 0.2, 0.0)
    sparsity: float = 0.95
    line_length: int = 16
    solver_tol: float = 1e-10


@dataclass
class Dataset:
    problem_name: str
    n: int
    d: int
    split: str
    records: list[SolutionRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def header(self) -> dict:
        return {
            "problem": self.problem_name,
            "n": self.n,
            "d": self.d,
            "split": self.split,
            "config": self.config,
        }


def default_proportions(problem: ParametricProblem) -> tuple[float, float, float]:
    if problem.p_ref is not None:
        return (0.6, 0.2, 0.2)
    return (0.8, 0.2, 0.0)


def split_counts(count: int, proportions) -> list[int]:
    """Largest-remainder split of count into integer shares."""
    props = np.asarray(proportions, dtype=float)
    if props.shape != (3,) or np.any(props < 0) or not np.isclose(props.sum(), 1.0):
        raise ValueError("proportions must be three non-negative numbers summing to 1")
    raw = props * count
    base = np.floor(raw).astype(int)
    rest = count - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rest]] += 1
    return [int(v) for v in base]


def sample_parameters(problem: ParametricProblem, count: int, proportions=None, seed: int = 0, line_length: int = 16) -> np.ndarray:
    """Box, line and load-scaling samples in fixed proportions (rows = samples)."""
    if count <= 0:
        raise ValueError("count must be positive")
    if proportions is None:
        proportions = default_proportions(problem)
    n_box, n_line, n_dist = split_counts(count, proportions)
    rng = np.random.default_rng(seed)
    lo, hi = problem.p_lo, problem.p_hi
    out = [rng.uniform(lo, hi, size=(n_box, problem.d))]

    if n_line:
        n_lines = -(-n_line // line_length)
        sizes = [n_line // n_lines + (k < n_line % n_lines) for k in range(n_lines)]
        for size in sizes:
            base = rng.uniform(lo, hi)
            j = int(rng.integers(problem.d))
            pts = np.repeat(base[None, :], size, axis=0)
            pts[:, j] = np.linspace(lo[j], hi[j], size) if size > 1 else base[j]
            out.append(pts)

    if n_dist:
        ref = problem.reference_parameter()
        with np.errstate(divide="ignore", invalid="ignore"):
            f_lo = np.max(np.where(ref > 0, lo / ref, -np.inf))
            f_hi = np.min(np.where(ref > 0, hi / ref, np.inf))
        if not np.isfinite(f_lo) or not np.isfinite(f_hi) or f_lo > f_hi:
            raise ValueError("reference parameter cannot be scaled inside the box")
        factors = rng.uniform(f_lo, f_hi, size=n_dist)
        out.append(factors[:, None] * ref[None, :])
    return np.vstack(out)


def sample_mask(n: int, d: int, sparsity: float, seed=0) -> MaskSpec:
    """Keep round((1 - sparsity) n d) entries (at least one), uniformly."""
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    total = n * d
    keep = max(1, int(round((1.0 - sparsity) * total)))
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=keep, replace=False))
    return MaskSpec(tuple((int(k // d), int(k % d)) for k in flat), float(sparsity))


def _record_seed(seed: int, split: str, index: int) -> list[int]:
    return [int(seed), _SPLIT_ID[split], int(index)]


def make_record(problem: ParametricProblem, p, mask: MaskSpec, solver_tol: float = 1e-10) -> SolutionRecord | None:
    """Solve at p and attach masked sensitivities; None if the solve fails."""
    res = solve(problem, p, SolverOptions(tol=solver_tol))
    if not res.converged:
        return None
    sens = kkt_sensitivity(problem, p, res)
    jac = []
    if sens.regular:
        jac = [(r, c, float(sens.dx_dp[r, c])) for r, c in mask.kept_entries]
    return SolutionRecord(
        p=np.asarray(p, dtype=float),
        x_star=res.x_star,
        lam=np.concatenate([res.lambda_eq, res.lambda_ineq]),
        objective=res.objective,
        jac_entries=jac,
        mask=mask,
        regularity=sens.status,
    )


def _job(args):
    problem_name, p, mask, tol = args
    return make_record(get_problem(problem_name), p, mask, tol)


def build_split(problem: ParametricProblem, split: str, count: int, cfg: GenerationConfig, threads: int = 1, problem_name: str | None = None) -> tuple[Dataset, dict]:
    ds = Dataset(problem.name, problem.n, problem.d, split, config=_config_dict(cfg))
    stats = {"requested": count, "solver_failures": 0, "degenerate": {}}
    if count <= 0:
        return ds, stats
    ps = sample_parameters(problem, count, cfg.proportions, seed=[cfg.seed, _SPLIT_ID[split]], line_length=cfg.line_length)
    masks = [sample_mask(problem.n, problem.d, cfg.sparsity, seed=_record_seed(cfg.seed, split, k)) for k in range(count)]
    if threads > 1 and problem_name is not None:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            recs = list(pool.map(_job, [(problem_name, ps[k], masks[k], cfg.solver_tol) for k in range(count)]))
    else:
        recs = [make_record(problem, ps[k], masks[k], cfg.solver_tol) for k in range(count)]
    for rec in recs:
        if rec is None:
            stats["solver_failures"] += 1
            continue
        if not rec.regular:
            stats["degenerate"][rec.regularity] = stats["degenerate"].get(rec.regularity, 0) + 1
        ds.records.append(rec)
    if stats["solver_failures"]:
        log.warning("%s: dropped %d failed solves", split, stats["solver_failures"])
    return ds, stats


def _config_dict(cfg: GenerationConfig) -> dict:
    out = asdict(cfg)
    out["proportions"] = list(cfg.proportions)
    return out


def build_dataset(
    problem: ParametricProblem,
    counts: dict | tuple = (512, 128, 128),
    proportions=None,
    sparsity: float = 0.95,
    seed: int = 0,
    threads: int = 1,
    problem_name: str | None = None,
) -> tuple[dict[str, Dataset], dict]:
    """Generate train/validation/test splits; returns (datasets, metadata)."""
    if isinstance(counts, dict):
        counts = (counts.get("train", 0), counts.get("validation", counts.get("val", 0)), counts.get("test", 0))
    if proportions is None:
        proportions = default_proportions(problem)
    cfg = GenerationConfig(seed=seed, proportions=tuple(float(v) for v in proportions), sparsity=sparsity)
    out, meta = {}, {}
    for split, count in zip(SPLITS, counts):
        out[split], meta[split] = build_split(problem, split, int(count), cfg, threads, problem_name)
    return out, meta


# -- persistence -----------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_dataset(ds: Dataset) -> str:
    lines = [json.dumps(ds.header(), sort_keys=True)]
    lines += [json.dumps(rec.to_json()) for rec in ds.records]
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    atomic_write_text(path, dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    head = json.loads(lines[0])
    ds = Dataset(head["problem"], int(head["n"]), int(head["d"]), head.get("split", "train"), config=head.get("config", {}))
    for ln in lines[1:]:
        rec = SolutionRecord.from_json(json.loads(ln))
        if rec.p.size != ds.d or rec.x_star.size != ds.n:
            raise ValueError(f"{path}: record dimensions differ from header")
        ds.records.append(rec)
    return ds
