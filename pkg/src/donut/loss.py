"""Training objective: factual loss plus the weighted orthogonal regularizer.

For a batch ``(X, T, Y)`` the objective is::

    mean((f(X,T) - Y)^2) + alpha * BCE(pi(X), T)
        + lam * mean((Y - psi* T - f(X,0) - eps (T - pi(X)))^2)

with ``psi* = mean(f(X,1) - f(X,0))``. Its derivative in ``eps`` is
``-2 * lam * <Y*(0) - f_eps(X,0), T - pi(X)>``, so a stationary point makes the
untreated residual orthogonal to the centered treatment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .datasets import Dataset
from .diffmath import Node, Tape
from .exceptions import PreconditionError
from .model import DonutModel, GraphNodes


@dataclass(frozen=True)
class LossConfig:
    """``variant="both_outcomes"`` adds the analogous treated-outcome term;
    ``psi_gradient="stopped"`` treats ``psi*`` as a constant in each step."""

    alpha: float = 1.0
    lam: float = 1.0
    variant: Literal["untreated_only", "both_outcomes"] = "untreated_only"
    psi_gradient: Literal["flow", "stopped"] = "flow"

    def __post_init__(self):
        for name in ("alpha", "lam"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.variant not in ("untreated_only", "both_outcomes"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.psi_gradient not in ("flow", "stopped"):
            raise ValueError(f"unknown psi_gradient {self.psi_gradient!r}")


class Objective:
    """The full objective wired onto a tape bound to ``model``'s parameters.

    Build once, then call :meth:`evaluate` / :meth:`gradients` on any batch.
    """

    def __init__(self, model: DonutModel, cfg: LossConfig = LossConfig()):
        self.model = model
        self.cfg = cfg
        tape = Tape()
        self.tape = tape
        x = tape.input("x", model.d)
        t = tape.input("t", 1)
        y = tape.input("y", 1)
        g: GraphNodes = model.graph(tape, x)
        self.nodes = g
        one = tape.const(1.0)
        f_fact = tape.add(tape.mul(t, g.f1), tape.mul(tape.sub(one, t), g.f0))
        self.mse = tape.squared_error(f_fact, y)
        self.ce = tape.bce(g.pi, t)
        self.factual = tape.add(self.mse, tape.mul(tape.const(cfg.alpha), self.ce))

        self.psi_star = tape.mean(tape.sub(g.f1, g.f0))
        psi = self.psi_star if cfg.psi_gradient == "flow" else tape.stop_gradient(self.psi_star)
        self.centered_t = tape.sub(t, g.pi)
        pert = tape.mul(g.epsilon, self.centered_t)
        self.ystar0 = tape.sub(y, tape.mul(psi, t))
        self.f0_eps = tape.add(g.f0, pert)
        reg = tape.squared_error(self.ystar0, self.f0_eps)
        if cfg.variant == "both_outcomes":
            self.ystar1 = tape.add(y, tape.mul(psi, tape.sub(one, t)))
            self.f1_eps = tape.add(g.f1, pert)
            reg = tape.add(reg, tape.squared_error(self.ystar1, self.f1_eps))
        self.regularizer = reg
        self.total = tape.add(self.factual, tape.mul(tape.const(cfg.lam), reg))
        tape.set_output(self.total)

    @staticmethod
    def feed(batch: Dataset) -> dict[str, np.ndarray]:
        if batch.n == 0:
            raise PreconditionError("empty batch")
        return {"x": batch.X, "t": batch.T[:, None], "y": batch.Y[:, None]}

    def _scalar(self, node: Node) -> float:
        return float(node.value[0, 0])

    def evaluate(self, batch: Dataset) -> dict[str, float]:
        """Forward pass; returns every named component of the objective."""
        self.tape.forward(self.feed(batch))
        return self.components()

    def components(self) -> dict[str, float]:
        return {
            "total": self._scalar(self.total),
            "factual": self._scalar(self.factual),
            "mse": self._scalar(self.mse),
            "cross_entropy": self._scalar(self.ce),
            "regularizer": self._scalar(self.regularizer),
            "psi_star": self._scalar(self.psi_star),
            "residual": self.residual(),
        }

    def residual(self, outcome: int = 0) -> float:
        """Orthogonality residual at the cached forward values."""
        if outcome == 0:
            r = self.ystar0.value - self.f0_eps.value
        else:
            if self.cfg.variant != "both_outcomes":
                raise ValueError("treated residual needs variant='both_outcomes'")
            r = self.ystar1.value - self.f1_eps.value
        return float(np.mean(r * self.centered_t.value))

    def gradients(self, batch: Dataset) -> tuple[dict[str, float], dict[str, np.ndarray]]:
        comps = self.evaluate(batch)
        return comps, self.tape.backward()


# --------------------------------------------------------------------------
# functional interface


def _as_batch(batch) -> Dataset:
    if isinstance(batch, Dataset):
        return batch
    X, T, Y = batch
    return Dataset(X, T, Y)


def factual_loss(model: DonutModel, batch, alpha: float = 1.0) -> float:
    """Squared error on observed outcomes plus ``alpha`` times the mean BCE."""
    obj = Objective(model, LossConfig(alpha=alpha, lam=0.0))
    return obj.evaluate(_as_batch(batch))["factual"]


def pseudo_ate(model: DonutModel, X) -> float:
    """Mean head difference ``mean(f(X,1) - f(X,0))``, evaluated on a tape."""
    tape = Tape()
    g = model.graph(tape, tape.input("x", model.d))
    psi = tape.mean(tape.sub(g.f1, g.f0))
    tape.set_output(psi)
    return float(tape.forward({"x": X})[0, 0])


def pseudo_outcome(Y, T, psi_star: float) -> np.ndarray:
    """Untreated pseudo outcome ``Y - psi* T``."""
    Y = np.asarray(Y, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if Y.shape != T.shape:
        raise PreconditionError(f"Y {Y.shape} and T {T.shape} differ in shape")
    return Y - psi_star * T


def orthogonal_regularizer(model: DonutModel, batch, cfg: LossConfig = LossConfig()) -> float:
    return Objective(model, cfg).evaluate(_as_batch(batch))["regularizer"]


def total_objective(model: DonutModel, batch, cfg: LossConfig = LossConfig()) -> float:
    return Objective(model, cfg).evaluate(_as_batch(batch))["total"]


def orthogonality_residual(model: DonutModel, dataset, outcome: int = 0) -> float:
    """``<Y*(t) - f_eps(X,t), T - pi(X)>`` for ``t = outcome``.

    ``psi*`` is the mean head difference over ``dataset``.
    """
    ds = _as_batch(dataset)
    if ds.n == 0:
        raise PreconditionError("empty dataset")
    f0, f1, pi = model.predict(ds.X)
    psi = float(np.mean(f1 - f0))
    centered = ds.T - pi
    eps = model.epsilon
    if outcome == 0:
        r = (ds.Y - psi * ds.T) - (f0 + eps * centered)
    else:
        r = (ds.Y + psi * (1.0 - ds.T)) - (f1 + eps * centered)
    return float(np.mean(r * centered))
