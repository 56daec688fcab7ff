"""Momentum SGD on the DONUT objective, early stopping and lambda selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import Dataset, Split
from .exceptions import NumericError, PreconditionError, TrainingError
from .loss import LossConfig, Objective
from .model import DonutModel, ModelConfig

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and model-selection settings.

    ``batch_size=None`` means full-batch gradient descent (one step per
    epoch). ``patience`` counts epochs without a validation improvement.
    ``seed`` may be an int or a sequence of ints.
    """

    learning_rate: float = 1e-3
    momentum: float = 0.9
    epochs: int = 300
    batch_size: int | None = None
    loss: LossConfig = LossConfig()
    model: ModelConfig = ModelConfig()
    patience: int = 30
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    seed: int | tuple[int, ...] = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def with_lambda(self, lam: float) -> "TrainConfig":
        return replace(self, loss=replace(self.loss, lam=float(lam)))


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    val_factual: float
    residual: float
    grad_epsilon: float


@dataclass
class TrainResult:
    model: DonutModel
    history: list[EpochRecord]
    selected_lambda: float
    stopped_epoch: int
    best_epoch: int
    best_val: float
    candidates: dict[float, "TrainResult"] = field(default_factory=dict)
    failed: dict[float, str] = field(default_factory=dict)


class MomentumSGD:
    """Heavy-ball update ``v <- m v - lr g``; ``w <- w + v`` (in place)."""

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float, momentum: float):
        self.params = params
        self.lr = learning_rate
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * g
            self.params[name] += v


def _validation_loss(model: DonutModel, val: Dataset, alpha: float) -> float:
    f0, f1, pi = model.predict(val.X)
    f = np.where(val.T == 1.0, f1, f0)
    p = np.clip(pi, 1e-12, 1 - 1e-12)
    with np.errstate(over="ignore", invalid="ignore"):
        ce = -np.mean(val.T * np.log(p) + (1 - val.T) * np.log1p(-p))
        loss = float(np.mean((f - val.Y) ** 2) + alpha * ce)
    if not np.isfinite(loss):
        raise NumericError("non-finite validation loss")
    return loss


def train(dataset: Dataset, split: Split, cfg: TrainConfig = TrainConfig(), model: DonutModel | None = None) -> TrainResult:
    """Fit a DONUT model on ``split.train``.

    Early stopping monitors the factual loss on ``split.validation`` and
    restores the best epoch's parameters. With an empty validation part the
    final parameters are returned.
    """
    tr = dataset.subset(split.train)
    n0, n1 = tr.arm_counts()
    if n0 == 0 or n1 == 0:
        raise PreconditionError(f"training part needs both arms (control={n0}, treated={n1})")
    val = dataset.subset(split.validation) if len(split.validation) else None

    if model is None:
        model = DonutModel.init(dataset.d, seed=cfg.seed, config=cfg.model)
    objective = Objective(model, cfg.loss)
    opt = MomentumSGD(model.params, cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    full_batch = cfg.batch_size is None or cfg.batch_size >= tr.n

    history: list[EpochRecord] = []
    best_val = np.inf
    best_epoch = 0
    best_state = {k: v.copy() for k, v in model.params.items()}
    since_best = 0
    stopped = cfg.epochs
    for epoch in range(1, cfg.epochs + 1):
        try:
            if full_batch:
                comps, grads = objective.gradients(tr)
                grad_eps = float(grads["epsilon"][0, 0])
                opt.step(grads)
            else:
                order = rng.permutation(tr.n)
                for start in range(0, tr.n, cfg.batch_size):
                    comps, grads = objective.gradients(tr.subset(order[start:start + cfg.batch_size]))
                    opt.step(grads)
                # report full-training-set diagnostics once per epoch
                comps, grads = objective.gradients(tr)
                grad_eps = float(grads["epsilon"][0, 0])
            if not all(np.isfinite(v).all() for v in model.params.values()):
                raise NumericError("non-finite parameters")
            val_loss = _validation_loss(model, val, cfg.loss.alpha) if val is not None else np.nan
        except NumericError as exc:
            raise TrainingError(f"diverged at epoch {epoch}: {exc}", epoch) from exc
        history.append(EpochRecord(epoch, comps["total"], val_loss, comps["residual"], grad_eps))
        if val is None:
            continue
        if val_loss < best_val:
            best_val, best_epoch, since_best = val_loss, epoch, 0
            best_state = {k: v.copy() for k, v in model.params.items()}
        else:
            since_best += 1
            if since_best >= cfg.patience:
                stopped = epoch
                break

    if val is not None:
        model.load_state(best_state)
    else:
        best_epoch = stopped
    log.debug("trained lambda=%g: stopped at %d, best epoch %d", cfg.loss.lam, stopped, best_epoch)
    return TrainResult(model, history, cfg.loss.lam, stopped, best_epoch, float(best_val))


def select_lambda(dataset: Dataset, split: Split, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Train once per grid value and keep the run with the lowest validation
    factual loss.

    Runs that diverge are skipped and listed in ``failed``; the successful
    runs are kept in ``candidates``.
    """
    if not cfg.lambda_grid:
        raise ValueError("lambda_grid is empty")
    results: dict[float, TrainResult] = {}
    failed: dict[float, str] = {}
    for lam in cfg.lambda_grid:
        try:
            results[float(lam)] = train(dataset, split, cfg.with_lambda(lam))
        except TrainingError as exc:
            failed[float(lam)] = str(exc)
            log.info("lambda=%g skipped: %s", lam, exc)
    if not results:
        raise TrainingError("all grid runs diverged; " + "; ".join(f"lambda={k:g}: {v}" for k, v in failed.items()))
    best = min(results, key=lambda lam: results[lam].best_val)
    chosen = results[best]
    chosen.candidates = results
    chosen.failed = failed
    return chosen
