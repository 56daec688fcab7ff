"""Command-line entry point.

Subcommands::

    simulate      write a synthetic dataset to CSV
    train         fit one model and print its estimate report as JSON
    bias-sweep    error across selection-bias levels
    ablate        grid-selected lambda against lambda = 0
    lambda-sweep  error for each fixed lambda
    eval          train and score methods on CSV datasets
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .datasets import SimSpec, kl_bias, load_csv, simulate, split, standardize, write_csv
from .estimators import estimate
from .exceptions import DonutError
from .experiments import run, spec_from_dict, train_config_from_dict, write_outputs
from .model import ModelConfig
from .training import TrainConfig, select_lambda, train

log = logging.getLogger("donut")

SWEEPS = {"bias-sweep": "bias_sweep", "ablate": "ablation", "lambda-sweep": "lambda_sweep", "eval": "csv_eval"}


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _training_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lambda", dest="lam", type=float, help="regularization weight")
    g.add_argument("--alpha", type=float, help="propensity cross-entropy weight")
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--lambda-grid", type=_floats, help="comma-separated grid for lambda selection")
    g.add_argument("--rep-width", type=int, help="representation layer width")
    g.add_argument("--head-width", type=int, help="outcome head layer width")
    batch = g.add_mutually_exclusive_group()
    batch.add_argument("--full-batch", action="store_true", help="one gradient step per epoch (default)")
    batch.add_argument("--batch-size", type=int)


def _sim_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--d", type=int, help="covariate dimension")
    g.add_argument("--n-control", type=int)
    g.add_argument("--n-treated", type=int)
    g.add_argument("--noise-var", type=float, help="outcome noise variance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="donut", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kl", type=float, default=0.0, help="target KL divergence between arms")
    p.add_argument("--out", required=True, help="output CSV path")
    _sim_flags(p)

    p = sub.add_parser("train", help="fit one model and print its estimate")
    p.add_argument("--data", help="CSV dataset (default: simulate one)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kl", type=float, default=0.0, help="bias level when simulating")
    p.add_argument("--select", action="store_true", help="select lambda over --lambda-grid")
    p.add_argument("--config", help="JSON file with a train_cfg object")
    p.add_argument("--out", help="write the fitted model as JSON")
    _training_flags(p)
    _sim_flags(p)

    for name, kind in SWEEPS.items():
        p = sub.add_parser(name, help=f"run the {kind.replace('_', ' ')} experiment")
        p.add_argument("--config", help="JSON file mirroring the experiment spec")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--reps", type=int, help="replications")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--full-scale", action="store_true",
                       help="n=7,500 and 100 replications instead of desk-scale settings")
        if kind == "csv_eval":
            p.add_argument("--data", nargs="+", required=True, help="CSV files, one per realization")
            p.add_argument("--methods", help="comma-separated subset of methods")
            p.add_argument("--metrics", help="comma-separated subset of metrics")
        else:
            p.add_argument("--levels", type=_floats, help="comma-separated KL levels")
            _sim_flags(p)
        if kind == "lambda_sweep":
            p.add_argument("--lambdas", type=_floats, help="comma-separated lambda values")
        if kind == "bias_sweep":
            p.add_argument("--no-compare", action="store_true", help="skip the lambda = 0 arm")
        _training_flags(p)
    return parser


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None


def _train_cfg(base: TrainConfig, args) -> TrainConfig:
    cfg = base
    if args.lam is not None or args.alpha is not None:
        loss = cfg.loss
        if args.lam is not None:
            loss = replace(loss, lam=args.lam)
        if args.alpha is not None:
            loss = replace(loss, alpha=args.alpha)
        cfg = replace(cfg, loss=loss)
    updates = {k: getattr(args, k) for k in ("learning_rate", "momentum", "epochs", "patience", "lambda_grid")
               if getattr(args, k) is not None}
    if args.full_batch:
        updates["batch_size"] = None
    elif args.batch_size is not None:
        updates["batch_size"] = args.batch_size
    if args.rep_width is not None or args.head_width is not None:
        m = cfg.model
        updates["model"] = ModelConfig(args.rep_width or m.rep_width, m.rep_layers,
                                       args.head_width or m.head_width, m.head_layers)
    return replace(cfg, **updates)


def _sim_spec(base: SimSpec, args, full_scale: bool = False) -> SimSpec:
    updates = {}
    if full_scale:
        updates.update(n_control=2500, n_treated=5000)
    for k in ("d", "n_control", "n_treated", "noise_var"):
        if getattr(args, k, None) is not None:
            updates[k] = getattr(args, k)
    return replace(base, **updates)


def cmd_simulate(args) -> int:
    spec = _sim_spec(SimSpec(seed=args.seed), args).with_kl(args.kl)
    ds = simulate(spec)
    write_csv(ds, args.out)
    log.info("wrote %d rows (kl=%.4g) to %s", ds.n, kl_bias(spec), args.out)
    return 0


def cmd_train(args) -> int:
    base = TrainConfig()
    if args.config:
        base = train_config_from_dict(_read_json(args.config).get("train_cfg", {}))
    cfg = replace(_train_cfg(base, args), seed=args.seed)
    if args.data:
        ds = load_csv(args.data)
    else:
        ds = simulate(_sim_spec(SimSpec(n_control=500, n_treated=1000, seed=args.seed), args).with_kl(args.kl))
    sp = split(ds, seed=args.seed)
    scaled, scaler = standardize(ds, sp)
    res = select_lambda(scaled, sp, cfg) if args.select else train(scaled, sp, cfg)
    report = estimate(res.model, scaled.subset(sp.train), scaled.X[sp.in_sample], scaler)
    payload = report.as_dict()
    payload.update(selected_lambda=res.selected_lambda, best_epoch=res.best_epoch, stopped_epoch=res.stopped_epoch)
    print(json.dumps(payload, indent=2))
    if args.out:
        res.model.save(args.out)
    return 0


def cmd_sweep(args) -> int:
    kind = SWEEPS[args.command]
    d = _read_json(args.config) if args.config else {}
    d["kind"] = kind
    if kind == "csv_eval":
        d["data_paths"] = list(args.data)
    spec = spec_from_dict(d)
    updates = {"output_path": args.out}
    if args.full_scale:
        updates["replications"] = 100
    if args.seed is not None:
        updates["master_seed"] = args.seed
    if args.reps is not None:
        updates["replications"] = args.reps
    updates["train_cfg"] = _train_cfg(spec.train_cfg, args)
    if kind == "csv_eval":
        if args.methods:
            updates["methods"] = tuple(m.strip() for m in args.methods.split(","))
        if args.metrics:
            updates["metrics"] = tuple(m.strip() for m in args.metrics.split(","))
    else:
        updates["sim_spec"] = _sim_spec(spec.sim_spec, args, args.full_scale)
        if args.levels:
            updates["bias_levels"] = args.levels
    if kind == "lambda_sweep" and args.lambdas:
        updates["lambda_values"] = args.lambdas
    if kind == "bias_sweep" and args.no_compare:
        updates["compare"] = False
    spec = replace(spec, **updates)
    result = run(spec)
    paths = write_outputs(result, args.out)
    for a in result.aggregates:
        print(f"{a.condition:<24} {a.method:<20} {a.metric:<24} {a.mean:.4f} +- {a.std:.4f} (n={a.n}, failed={a.failures})")
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return 1 if result.aggregates and all(a.n == 0 for a in result.aggregates) else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s")
    handler = {"simulate": cmd_simulate, "train": cmd_train}.get(args.command, cmd_sweep)
    np.seterr(all="ignore")
    try:
        return handler(args)
    except (DonutError, ValueError, TypeError, OSError) as exc:
        print(f"donut {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
