"""Replicated experiments: selection-bias sweep, ablation, lambda sweep and
evaluation on CSV datasets.

Each runner returns an :class:`AggregateResult` holding one raw row per
(replication, condition, method, metric) and per-group mean and standard
deviation. Results depend only on the :class:`ExperimentSpec`; every
replication draws its data, split and initialization from seeds derived from
``master_seed`` and the replication index.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .datasets import CsvSchema, Dataset, SimSpec, kl_bias, load_csv, replication_seed, simulate, split, standardize
from .estimators import diff_in_means, donut_ate, fit_armwise_linear, ols1_ate, plr_ate
from .exceptions import DonutError, PreconditionError
from .loss import LossConfig
from .metrics import eps_ate_mu, eps_ate_y, eps_att
from .model import DonutModel, ModelConfig, outcome, propensity
from .training import TrainConfig, select_lambda, train

log = logging.getLogger(__name__)

Kind = Literal["bias_sweep", "ablation", "lambda_sweep", "csv_eval"]
KINDS = ("bias_sweep", "ablation", "lambda_sweep", "csv_eval")
METRICS = ("eps_ate_mu", "eps_ate_y", "eps_att")
CSV_METHODS = ("donut", "donut_no_reg", "ols1", "ols2", "diff_in_means", "plr")
# Reduced widths with a larger step and a longer budget: converges on the
# default simulation in seconds per run on one CPU core.
DESK_TRAIN_CONFIG = TrainConfig(learning_rate=3e-3, epochs=1000, patience=50, model=ModelConfig(64, 3, 32, 2))

RAW_FIELDS = ("replication", "condition", "method", "metric", "value", "error")
AGG_FIELDS = ("condition", "method", "metric", "mean", "std", "n", "failures")


@dataclass
class ExperimentSpec:
    """Everything an experiment run depends on.

    Synthetic kinds draw data from ``sim_spec`` with the mean shift set to
    reach each entry of ``bias_levels`` (a KL divergence). ``csv_eval`` reads
    ``data_paths`` instead; each file is one realization and is split
    ``replications`` times.
    """

    kind: Kind
    replications: int = 20
    master_seed: int = 0
    train_cfg: TrainConfig = TrainConfig()
    sim_spec: SimSpec | None = None
    data_paths: tuple[str, ...] = ()
    bias_levels: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 5.0, 10.0)
    lambda_values: tuple[float, ...] = (0.0, 0.01, 0.1, 1.0, 10.0)
    split_ratios: tuple[float, float, float] = (0.63, 0.27, 0.10)
    compare: bool = True
    methods: tuple[str, ...] = CSV_METHODS
    metrics: tuple[str, ...] | None = None
    schema: CsvSchema | None = None
    output_path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.kind == "csv_eval":
            if self.sim_spec is not None or not self.data_paths:
                raise ValueError("csv_eval needs data_paths and no sim_spec")
            unknown = set(self.methods) - set(CSV_METHODS)
            if unknown:
                raise ValueError(f"unknown methods {sorted(unknown)}")
        else:
            if self.data_paths:
                raise ValueError(f"{self.kind} draws synthetic data; data_paths must be empty")
            if self.sim_spec is None:
                self.sim_spec = SimSpec(n_control=500, n_treated=1000)
            if not self.bias_levels:
                raise ValueError("bias_levels is empty")
        if self.kind == "lambda_sweep" and not self.lambda_values:
            raise ValueError("lambda_values is empty")
        if self.metrics is not None:
            unknown = set(self.metrics) - set(METRICS)
            if unknown:
                raise ValueError(f"unknown metrics {sorted(unknown)}")


@dataclass
class RawRow:
    replication: int
    condition: str
    method: str
    metric: str
    value: float
    error: str = ""


@dataclass
class AggregateRow:
    condition: str
    method: str
    metric: str
    mean: float
    std: float
    n: int
    failures: int


@dataclass
class AggregateResult:
    spec: ExperimentSpec
    raw: list[RawRow]
    aggregates: list[AggregateRow] = field(default_factory=list)

    def values(self, condition: str, method: str, metric: str) -> np.ndarray:
        """Successful raw values of one group, in replication order."""
        return np.array([
            r.value for r in self.raw
            if (r.condition, r.method, r.metric) == (condition, method, metric) and not r.error
        ])

    def mean(self, condition: str, method: str, metric: str) -> float:
        for a in self.aggregates:
            if (a.condition, a.method, a.metric) == (condition, method, metric):
                return a.mean
        raise KeyError((condition, method, metric))

    @property
    def failures(self) -> list[RawRow]:
        return [r for r in self.raw if r.error]


def aggregate(raw: Sequence[RawRow]) -> list[AggregateRow]:
    """Mean and sample standard deviation (``ddof=1``) per group.

    Groups keep the order of first appearance. Failed rows count toward
    ``failures`` only. A group with one success has ``std = nan``.
    """
    groups: dict[tuple[str, str, str], list[RawRow]] = {}
    for r in raw:
        groups.setdefault((r.condition, r.method, r.metric), []).append(r)
    out = []
    for (cond, method, metric), rows in groups.items():
        vals = np.array([r.value for r in rows if not r.error], dtype=np.float64)
        fails = sum(1 for r in rows if r.error)
        mean = float(np.mean(vals)) if vals.size else float("nan")
        std = float(np.std(vals, ddof=1)) if vals.size > 1 else float("nan")
        out.append(AggregateRow(cond, method, metric, mean, std, int(vals.size), fails))
    return out


# --------------------------------------------------------------------------
# one replication


def _fmt(v: float) -> str:
    return f"{float(v):g}"


def _sim_dataset(spec: ExperimentSpec, rep: int, level: float) -> Dataset:
    """Covariance and weights depend on the replication only, so replications
    are paired across bias levels and arms."""
    base = replace(spec.sim_spec, seed=replication_seed(spec.master_seed, rep), mu1=None)
    return simulate(base.with_kl(level))


def _seeded(cfg: TrainConfig, master: int, rep: int) -> TrainConfig:
    return replace(cfg, seed=(int(master), int(rep), 1))


@dataclass
class _Prepared:
    raw: Dataset
    scaled: Dataset
    scaler: object
    split: object

    @property
    def scopes(self):
        return {"in_sample": self.split.in_sample, "out_sample": self.split.test}


def _prepare(ds: Dataset, spec: ExperimentSpec, rep: int, salt: int = 0) -> _Prepared:
    sp = split(ds, spec.split_ratios, seed=(spec.master_seed, rep, salt, 2))
    scaled, scaler = standardize(ds, sp)
    return _Prepared(ds, scaled, scaler, sp)


def _available_metrics(ds: Dataset, requested) -> list[str]:
    have = {
        "eps_ate_mu": ds.mu0 is not None and ds.mu1 is not None,
        "eps_ate_y": ds.y0 is not None and ds.y1 is not None,
        "eps_att": ds.e is not None,
    }
    if requested is None:
        return [m for m in METRICS if have[m]]
    missing = {
        "eps_ate_mu": "mu0, mu1",
        "eps_ate_y": "y0, y1",
        "eps_att": "e",
    }
    for m in requested:
        if not have[m]:
            raise PreconditionError(f"metric {m} needs columns {missing[m]}, which the data lacks")
    return list(requested)


def _score(prep: _Prepared, pred0: np.ndarray, pred1: np.ndarray, metrics) -> dict[str, float]:
    """Metrics in original outcome units for every scope that has rows.

    ``pred0``/``pred1`` are outcome predictions for all rows of the raw data.
    """
    ds = prep.raw
    out = {}
    for scope, idx in prep.scopes.items():
        if len(idx) == 0:
            continue
        sub = ds.subset(idx)
        p0, p1 = pred0[idx], pred1[idx]
        for m in metrics:
            if m == "eps_ate_mu":
                v = eps_ate_mu(sub.mu0, sub.mu1, p0, p1)
            elif m == "eps_ate_y":
                v = eps_ate_y(sub.y0, sub.y1, p0, p1)
            else:
                if not (sub.T == 1.0).any() or not ((sub.T == 0.0) & (sub.e > 0)).any():
                    continue
                v = eps_att(sub, sub.e > 0, p0, p1)
            out[f"{m}/{scope}"] = v
    return out


def _model_predictions(model: DonutModel, prep: _Prepared) -> tuple[np.ndarray, np.ndarray]:
    f0, f1, _ = model.predict(prep.scaled.X)
    s = prep.scaler
    return s.unscale_outcome(f0), s.unscale_outcome(f1)


def _effect_predictions(n: int, psi: float) -> tuple[np.ndarray, np.ndarray]:
    # a scalar estimate scored through the same metric code
    return np.zeros(n), np.full(n, float(psi))


def _rows(rep, condition, method, scores: dict[str, float]) -> list[RawRow]:
    return [RawRow(rep, condition, method, k, float(v)) for k, v in scores.items()]


def _guarded(rep: int, condition: str, methods: Sequence[str], metrics: Sequence[str],
             work: Callable[[], list[RawRow]]) -> list[RawRow]:
    """Run one unit of work; on failure emit one failed row per expected
    (method, metric) so the failure is counted in every affected group."""
    try:
        return work()
    except (DonutError, ArithmeticError, ValueError, FloatingPointError) as exc:
        msg = f"{type(exc).__name__}: {exc}"
        log.warning("replication %d, %s failed: %s", rep, condition, msg)
        return [RawRow(rep, condition, m, k, float("nan"), msg) for m in methods for k in metrics]


_SIM_METRICS = ("eps_ate_mu/in_sample", "eps_ate_mu/out_sample")


# --------------------------------------------------------------------------
# runners


def run_bias_sweep(spec: ExperimentSpec) -> AggregateResult:
    """ATE error of DONUT across selection-bias levels.

    Methods per level: ``donut`` (the configured lambda), ``donut_no_reg``
    (lambda = 0, when ``compare``) and ``diff_in_means``. The achieved KL
    divergence is recorded under method ``data``.
    """
    raw: list[RawRow] = []
    methods = ["donut"] + (["donut_no_reg"] if spec.compare else []) + ["diff_in_means"]
    for level in spec.bias_levels:
        cond = f"kl={_fmt(level)}"
        for rep in range(spec.replications):
            def work(level=level, rep=rep, cond=cond):
                base = replace(spec.sim_spec, seed=replication_seed(spec.master_seed, rep), mu1=None)
                sim = base.with_kl(level)
                prep = _prepare(simulate(sim), spec, rep)
                rows = [RawRow(rep, cond, "data", "kl_bias", kl_bias(sim))]
                cfg = _seeded(spec.train_cfg, spec.master_seed, rep)
                arms = [("donut", cfg)]
                if spec.compare:
                    arms.append(("donut_no_reg", cfg.with_lambda(0.0)))
                for name, c in arms:
                    res = train(prep.scaled, prep.split, c)
                    rows += _rows(rep, cond, name, _score(prep, *_model_predictions(res.model, prep), ["eps_ate_mu"]))
                tr = prep.raw.subset(prep.split.train)
                psi = diff_in_means(tr)
                rows += _rows(rep, cond, "diff_in_means",
                              _score(prep, *_effect_predictions(prep.raw.n, psi), ["eps_ate_mu"]))
                return rows
            raw += _guarded(rep, cond, methods, _SIM_METRICS, work)
    return AggregateResult(spec, raw, aggregate(raw))


def run_ablation(spec: ExperimentSpec) -> AggregateResult:
    """Grid-selected lambda against lambda = 0 on identical data and seeds.

    Besides the two arms, every grid member that trained without diverging is
    recorded under method ``grid[lambda=<value>]``, the selected value under
    metric ``selected_lambda`` and the number of diverged members under
    ``diverged_grid_members``.
    """
    raw: list[RawRow] = []
    for level in spec.bias_levels:
        cond = f"kl={_fmt(level)}"
        for rep in range(spec.replications):
            def work(level=level, rep=rep, cond=cond):
                prep = _prepare(_sim_dataset(spec, rep, level), spec, rep)
                cfg = _seeded(spec.train_cfg, spec.master_seed, rep)
                chosen = select_lambda(prep.scaled, prep.split, cfg)
                rows = _rows(rep, cond, "donut", _score(prep, *_model_predictions(chosen.model, prep), ["eps_ate_mu"]))
                rows.append(RawRow(rep, cond, "donut", "selected_lambda", chosen.selected_lambda))
                rows.append(RawRow(rep, cond, "donut", "diverged_grid_members", float(len(chosen.failed))))
                base = train(prep.scaled, prep.split, cfg.with_lambda(0.0))
                rows += _rows(rep, cond, "donut_no_reg", _score(prep, *_model_predictions(base.model, prep), ["eps_ate_mu"]))
                for lam, cand in chosen.candidates.items():
                    rows += _rows(rep, cond, f"grid[lambda={_fmt(lam)}]",
                                  _score(prep, *_model_predictions(cand.model, prep), ["eps_ate_mu"]))
                return rows
            raw += _guarded(rep, cond, ["donut", "donut_no_reg"], _SIM_METRICS, work)
    return AggregateResult(spec, raw, aggregate(raw))


def run_lambda_sweep(spec: ExperimentSpec) -> AggregateResult:
    """DONUT error for each fixed lambda on the same data per replication."""
    raw: list[RawRow] = []
    for level in spec.bias_levels:
        for rep in range(spec.replications):
            try:
                prep = _prepare(_sim_dataset(spec, rep, level), spec, rep)
            except DonutError as exc:
                for lam in spec.lambda_values:
                    cond = f"kl={_fmt(level)},lambda={_fmt(lam)}"
                    raw += [RawRow(rep, cond, "donut", k, float("nan"), f"{type(exc).__name__}: {exc}")
                            for k in _SIM_METRICS]
                continue
            cfg = _seeded(spec.train_cfg, spec.master_seed, rep)
            for lam in spec.lambda_values:
                cond = f"kl={_fmt(level)},lambda={_fmt(lam)}"

                def work(lam=lam, cond=cond, rep=rep, prep=prep):
                    res = train(prep.scaled, prep.split, cfg.with_lambda(lam))
                    return _rows(rep, cond, "donut", _score(prep, *_model_predictions(res.model, prep), ["eps_ate_mu"]))
                raw += _guarded(rep, cond, ["donut"], _SIM_METRICS, work)
    return AggregateResult(spec, raw, aggregate(raw))


def _csv_methods(spec: ExperimentSpec, prep: _Prepared, rep: int, cond: str, metrics) -> list[RawRow]:
    cfg = _seeded(spec.train_cfg, spec.master_seed, rep)
    rows: list[RawRow] = []
    want = set(spec.methods)
    n = prep.raw.n
    tr_raw = prep.raw.subset(prep.split.train)

    def add(method, pred0, pred1):
        rows.extend(_rows(rep, cond, method, _score(prep, pred0, pred1, metrics)))

    if "donut" in want:
        chosen = select_lambda(prep.scaled, prep.split, cfg)
        add("donut", *_model_predictions(chosen.model, prep))
        rows.append(RawRow(rep, cond, "donut", "selected_lambda", chosen.selected_lambda))
    base = None
    if want & {"donut_no_reg", "plr"}:
        base = train(prep.scaled, prep.split, cfg.with_lambda(0.0))
    if "donut_no_reg" in want:
        add("donut_no_reg", *_model_predictions(base.model, prep))
    if "plr" in want:
        # nuisances from the unregularized network, ratio on the training part
        tr_scaled = prep.scaled.subset(prep.split.train)
        psi = plr_ate(lambda X: outcome(base.model, X, 0), lambda X: propensity(base.model, X), tr_scaled)
        add("plr", *_effect_predictions(n, prep.scaler.unscale_effect(psi)))
    if "ols1" in want:
        add("ols1", *_effect_predictions(n, ols1_ate(tr_raw)))
    if "ols2" in want:
        fit = fit_armwise_linear(tr_raw)
        add("ols2", fit.predict(prep.raw.X, 0), fit.predict(prep.raw.X, 1))
    if "diff_in_means" in want:
        add("diff_in_means", *_effect_predictions(n, diff_in_means(tr_raw)))
    return rows


def run_csv_eval(spec: ExperimentSpec) -> AggregateResult:
    """Train and score every requested method on each file and split.

    Schema problems are raised immediately with the file name; failures
    during fitting are recorded and the run continues.
    """
    raw: list[RawRow] = []
    rep = 0
    for i, path in enumerate(spec.data_paths):
        ds = load_csv(path, spec.schema)
        metrics = _available_metrics(ds, spec.metrics)
        if not metrics:
            raise PreconditionError(f"{path}: no ground-truth columns (mu0/mu1, y0/y1 or e) to score against")
        expected = [f"{m}/{s}" for m in metrics for s in ("in_sample", "out_sample")]
        for r in range(spec.replications):
            def work(r=r, rep=rep):
                prep = _prepare(ds, spec, r, salt=i)
                return _csv_methods(spec, prep, rep, "csv", metrics)
            raw += _guarded(rep, "csv", list(spec.methods), expected, work)
            rep += 1
    return AggregateResult(spec, raw, aggregate(raw))


RUNNERS: dict[str, Callable[[ExperimentSpec], AggregateResult]] = {
    "bias_sweep": run_bias_sweep,
    "ablation": run_ablation,
    "lambda_sweep": run_lambda_sweep,
    "csv_eval": run_csv_eval,
}


def run(spec: ExperimentSpec) -> AggregateResult:
    return RUNNERS[spec.kind](spec)


# --------------------------------------------------------------------------
# serialization


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    return _plain(d)


def _tuple(v):
    return tuple(_tuple(x) for x in v) if isinstance(v, list) else v


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "loss" in d:
        d["loss"] = LossConfig(**d["loss"])
    if "model" in d:
        d["model"] = ModelConfig(**d["model"])
    if "lambda_grid" in d:
        d["lambda_grid"] = tuple(float(x) for x in d["lambda_grid"])
    if isinstance(d.get("seed"), list):
        d["seed"] = tuple(d["seed"])
    return TrainConfig(**d)


def spec_from_dict(d: dict) -> ExperimentSpec:
    """Inverse of :func:`spec_to_dict`; unknown keys raise ``TypeError``."""
    d = dict(d)
    if "train_cfg" in d:
        d["train_cfg"] = train_config_from_dict(d["train_cfg"])
    if d.get("sim_spec") is not None:
        sim = dict(d["sim_spec"])
        for k in ("mu1", "Sigma", "w"):
            if sim.get(k) is not None:
                sim[k] = np.asarray(sim[k], dtype=np.float64)
        if isinstance(sim.get("seed"), list):
            sim["seed"] = tuple(sim["seed"])
        d["sim_spec"] = SimSpec(**sim)
    if d.get("schema") is not None:
        d["schema"] = CsvSchema(**d["schema"])
    for k in ("data_paths", "bias_levels", "lambda_values", "split_ratios", "methods", "metrics"):
        if d.get(k) is not None:
            d[k] = _tuple(d[k])
    return ExperimentSpec(**d)


def write_outputs(result: AggregateResult, out_dir) -> dict[str, Path]:
    """Write ``raw.csv``, ``aggregate.csv`` and ``manifest.json`` to ``out_dir``.

    Floats are written with ``repr`` so the CSVs round-trip exactly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"raw": out / "raw.csv", "aggregate": out / "aggregate.csv", "manifest": out / "manifest.json"}
    with paths["raw"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_FIELDS)
        for r in result.raw:
            w.writerow([r.replication, r.condition, r.method, r.metric, repr(float(r.value)), r.error])
    with paths["aggregate"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGG_FIELDS)
        for a in result.aggregates:
            w.writerow([a.condition, a.method, a.metric, repr(a.mean), repr(a.std), a.n, a.failures])
    spec = result.spec
    manifest = {
        "spec": spec_to_dict(spec),
        "replication_seeds": [replication_seed(spec.master_seed, r) for r in range(spec.replications)],
        "rows": len(result.raw),
        "failures": len(result.failures),
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def read_raw(path) -> list[RawRow]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            RawRow(int(r["replication"]), r["condition"], r["method"], r["metric"], float(r["value"]), r["error"])
            for r in csv.DictReader(fh)
        ]
