"""Command-line entry point for data generation, training and evaluation.

Subcommands: generate, solve, train, eval, compare, verify-bounds, ablate-mask.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
Options resolve as flag, then JSON config (``--config``), then default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import SPLITS, atomic_write_text, build_dataset, dumps_dataset, load_dataset
from .evaluation import ablate_mask, compare_models, evaluate_model, verify_bounds, write_csv
from .problems import get_problem
from .proxy import load_model, save_model
from .solver import SolverOptions, solve
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("sobolev_proxy")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
SPLIT_FILES = {"train": "train.jsonl", "validation": "val.jsonl", "test": "test.jsonl"}


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Manifest:
    """One manifest.json-style record per run, written next to the outputs."""

    def __init__(self, command: str, config: dict, inputs: list, seed=None):
        self.data = {
            "subcommand": command,
            "config": config,
            "inputs": [str(p) for p in inputs],
            "outputs": [],
            "seed": seed,
            "version": __version__,
            "started": datetime.now(timezone.utc).isoformat(),
        }

    def output(self, path, text: str) -> None:
        atomic_write_text(path, text)
        self.data["outputs"].append(str(path))

    def write(self, path, **extra) -> None:
        self.data.update(extra)
        self.data["finished"] = datetime.now(timezone.utc).isoformat()
        atomic_write_text(path, _dump(self.data))


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _threads(flag) -> int:
    if flag is not None:
        return int(flag)
    env = os.environ.get("SOBOLEV_PROXY_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"SOBOLEV_PROXY_THREADS must be an integer, got {env!r}")
    return 1


def _config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _resolve(args, cfg: dict, key: str, default=None, attr: str | None = None):
    val = getattr(args, attr or key, None)
    if val is not None:
        return val
    return cfg.get(key, default)


# flag name -> TrainConfig field
_TRAIN_FLAGS = {
    "mode": "loss_mode",
    "lambda_": "lambda_weight",
    "epochs": "epochs",
    "batch": "batch_size",
    "widths": "hidden",
    "activation": "activation",
    "lr": "lr",
    "seed": "seed",
    "beta": "penalty_beta",
    "gamma": "penalty_gamma",
    "projection": "projection",
    "val_every": "val_every",
}


def _train_config(args) -> TrainConfig:
    cfg = _config_file(args.config)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    values = dict(cfg)
    for flag, name in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    return TrainConfig(**values)


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--mode", choices=["value", "sobolev", "selfsup", "selfsup_sobolev"])
    p.add_argument("--lambda", dest="lambda_", type=float, help="Jacobian term weight")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--widths", type=int, nargs="+", help="hidden layer widths")
    p.add_argument("--activation", choices=["tanh", "sigmoid", "softplus", "relu", "leaky_relu"])
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float, help="equality/inequality penalty weight")
    p.add_argument("--gamma", type=float, help="bound penalty weight")
    p.add_argument("--projection", action="store_true", default=None, help="portfolio feasibility head")
    p.add_argument("--val-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sobolev-proxy", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="solve sampled instances and write JSONL splits")
    g.add_argument("--config")
    g.add_argument("--problem")
    g.add_argument("--train", type=int)
    g.add_argument("--val", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--sparsity", type=float)
    g.add_argument("--proportions", type=float, nargs=3, metavar=("BOX", "LINE", "DIST"))
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int)
    g.add_argument("--out", required=True)

    s = sub.add_parser("solve", help="solve one instance")
    s.add_argument("--problem", required=True)
    s.add_argument("--p", nargs="+", help="parameter vector, comma or space separated (default: reference)")
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--out")

    t = sub.add_parser("train", help="fit a proxy model")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    _add_train_flags(t)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="MSE, GAP and INF of a model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)

    c = sub.add_parser("compare", help="RMI of a candidate model against a baseline")
    c.add_argument("--baseline", required=True)
    c.add_argument("--candidate", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)

    v = sub.add_parser("verify-bounds", help="check interpolation error bounds on sin")
    v.add_argument("--points", type=int, nargs="+", default=[5, 9, 17, 33])
    v.add_argument("--grid", type=int, default=4096)
    v.add_argument("--pairs", type=int, default=100_000)
    v.add_argument("--out")

    a = sub.add_parser("ablate-mask", help="retrain across Jacobian mask densities")
    a.add_argument("--data", required=True)
    a.add_argument("--test", required=True)
    a.add_argument("--kept", type=float, nargs="*", default=[0.05, 0.10, 0.25, 1.0])
    _add_train_flags(a)
    a.add_argument("--out", required=True)
    return ap


# -- subcommands -------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config_file(args.config)
    name = _resolve(args, cfg, "problem")
    if name is None:
        raise UsageError("--problem is required")
    problem = get_problem(name)
    counts = tuple(int(_resolve(args, cfg, k, 0)) for k in ("train", "val", "test"))
    if min(counts) < 0 or sum(counts) == 0:
        raise UsageError("split sizes must be non-negative and not all zero")
    sparsity = float(_resolve(args, cfg, "sparsity", 0.95))
    seed = int(_resolve(args, cfg, "seed", 0))
    proportions = _resolve(args, cfg, "proportions")
    threads = _threads(_resolve(args, cfg, "threads"))
    out = Path(args.out)
    resolved = {"problem": name, "train": counts[0], "val": counts[1], "test": counts[2], "sparsity": sparsity, "seed": seed, "proportions": proportions, "threads": threads}
    man = Manifest("generate", resolved, [], seed)
    datasets, meta = build_dataset(problem, counts, proportions, sparsity, seed, threads, problem_name=name)
    for split in SPLITS:
        man.output(out / SPLIT_FILES[split], dumps_dataset(datasets[split]))
    man.write(out / "manifest.json", generation=meta)
    for split in SPLITS:
        m = meta[split]
        print(f"{split}: {len(datasets[split])}/{m['requested']} records, {m['solver_failures']} failed, degenerate {m['degenerate']}")
    return EXIT_OK


def cmd_solve(args) -> int:
    problem = get_problem(args.problem)
    if args.p:
        try:
            p = np.array([float(t) for tok in args.p for t in tok.split(",") if t.strip()])
        except ValueError:
            raise UsageError(f"--p must be numbers, got {' '.join(args.p)!r}")
    else:
        p = problem.reference_parameter()
    problem.check_dims(problem.initial_point(p), p)
    res = solve(problem, p, SolverOptions(tol=args.tol, max_iter=args.max_iter))
    text = res.to_text()
    if args.out:
        out = Path(args.out)
        man = Manifest("solve", {"problem": args.problem, "p": [float(v) for v in p], "tol": args.tol, "max_iter": args.max_iter}, [])
        man.output(out, text)
        man.write(_manifest_path(out), status=res.status)
    else:
        sys.stdout.write(text)
    if not res.converged:
        raise NumericalFailure(f"solver stopped with status {res.status}")
    return EXIT_OK


def _report_paths(out: Path):
    stem = out.with_suffix("")
    return Path(f"{stem}.report.json"), Path(f"{stem}.report.csv")


def cmd_train(args) -> int:
    config = _train_config(args)
    ds = load_dataset(args.data)
    val = load_dataset(args.val_data) if args.val_data else None
    out = Path(args.out)
    man = Manifest("train", config.to_dict(), [args.data] + ([args.val_data] if args.val_data else []), config.seed)
    model, report = train(ds, config, validation=val)
    rj, rc = _report_paths(out)
    man.output(out, save_model(model))
    man.output(rj, _dump(report.to_json()))
    man.output(rc, report.to_csv())
    man.write(_manifest_path(out), wall_time=report.wall_time)
    if report.loss:
        print(f"final loss {report.loss[-1]:.6g} (value {report.value_term[-1]:.6g}, jacobian {report.jac_term[-1]:.6g})")
    return EXIT_OK


def _read_model(path):
    with open(path, encoding="utf-8") as fh:
        return load_model(fh.read())


def cmd_eval(args) -> int:
    model = _read_model(args.model)
    ds = load_dataset(args.data)
    if model.d != ds.d or model.n != ds.n:
        raise UsageError("model and dataset dimensions differ")
    problem = get_problem(ds.problem_name)
    rep = evaluate_model(model, ds, problem)
    out = Path(args.out)
    man = Manifest("eval", {}, [args.model, args.data])
    man.output(out, _dump(rep.to_json()))
    man.output(out.with_suffix(".csv"), rep.to_csv())
    man.write(_manifest_path(out))
    s = rep.summary()
    print(f"mse {s['mse']['mean']}, gap {s['gap']['mean']}, inf {s['inf']['mean']}")
    return EXIT_OK


def cmd_compare(args) -> int:
    base, cand = _read_model(args.baseline), _read_model(args.candidate)
    ds = load_dataset(args.data)
    problem = get_problem(ds.problem_name)
    r, _, _ = compare_models(base, cand, ds, problem)
    out = Path(args.out)
    man = Manifest("compare", {}, [args.baseline, args.candidate, args.data])
    rows = [] if r is None else [(k, v) for k, v in enumerate(r)]
    man.output(out, write_csv(["instance", "rmi"], rows))
    man.write(_manifest_path(out), rmi_defined=r is not None)
    if r is None:
        print("rmi undefined: candidate has no constraint violations")
    else:
        print(f"median rmi {float(np.median(r)):.6g}%")
    return EXIT_OK


def cmd_verify_bounds(args) -> int:
    if any(k < 2 for k in args.points) or args.grid < 2:
        raise UsageError("need at least two training points and two grid points")
    rows, rates = verify_bounds(point_counts=tuple(args.points), grid=args.grid, pairs=args.pairs)
    keys = ["check", "points", "delta", "sup_error", "bound", "pass"]
    table = write_csv(keys, [[r[k] for k in keys] for r in rows])
    rate_keys = ["interpolant", "from_points", "to_points", "ratio", "lo", "hi", "pass"]
    rate_table = write_csv(rate_keys, [[r[k] for k in rate_keys] for r in rates])
    if args.out:
        out = Path(args.out)
        man = Manifest("verify-bounds", {"points": args.points, "grid": args.grid, "pairs": args.pairs}, [])
        man.output(out, table)
        man.output(out.with_name(out.stem + ".rates.csv"), rate_table)
        man.write(_manifest_path(out))
    sys.stdout.write(table)
    if rates:
        sys.stdout.write(rate_table)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _train_config(args)
    if config.loss_mode not in ("sobolev", "selfsup_sobolev"):
        raise UsageError("mask ablation needs a Sobolev loss mode")
    if any(not 0.0 < k <= 1.0 for k in args.kept):
        raise UsageError("kept fractions must lie in (0, 1]")
    ds, test = load_dataset(args.data), load_dataset(args.test)
    rows = ablate_mask(ds, test, [round(1.0 - k, 12) for k in args.kept], config)
    out = Path(args.out)
    man = Manifest("ablate-mask", dict(config.to_dict(), kept=args.kept), [args.data, args.test], config.seed)
    man.output(out, write_csv(["sparsity", "kept", "mse"], [[r["sparsity"], r["kept"], r["mse"]] for r in rows]))
    man.write(_manifest_path(out))
    for r in rows:
        print(f"kept {r['kept']:.2f}: test mse {r['mse']:.6g}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "verify-bounds": cmd_verify_bounds,
    "ablate-mask": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TrainingDiverged, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError, TypeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
