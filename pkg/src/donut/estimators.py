"""Average treatment effect estimators.

``donut_ate`` averages the perturbed head difference of a trained model. The
ratio estimator in :func:`closed_form_ate` solves the orthogonality condition
for the effect and is used as an independent cross-check; :func:`plr_ate`
evaluates the same ratio with externally estimated nuisance functions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .datasets import Dataset, ScalerParams, Split
from .exceptions import EstimatorError, PreconditionError
from .loss import orthogonality_residual
from .model import DonutModel, perturbed_outcome, propensity

PROPENSITY_CLIP = 0.01


@dataclass
class EstimateReport:
    method: str
    psi_hat: float
    orthogonality_residual: float
    closed_form_psi: float

    @property
    def closed_form_gap(self) -> float:
        return abs(self.psi_hat - self.closed_form_psi)

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "psi_hat": self.psi_hat,
            "orthogonality_residual": self.orthogonality_residual,
            "closed_form_psi": self.closed_form_psi,
            "closed_form_gap": self.closed_form_gap,
        }


def donut_ate(model: DonutModel, X) -> float:
    """Mean of ``f_eps(X,1) - f_eps(X,0)``.

    The perturbation ``eps (T - pi(X))`` is shared by both heads and cancels,
    so no treatment vector is needed.
    """
    f0, f1, _ = model.predict(X)
    return float(np.mean(f1 - f0))


def _ratio(Y, T, f0_hat, pi_hat, clip: float) -> float:
    pi_c = np.clip(pi_hat, clip, 1.0 - clip)
    centered = T - pi_c
    num = np.mean((Y - f0_hat) * centered)
    den = np.mean(T * centered)
    if abs(den) <= 1e-8:
        raise EstimatorError(f"ratio estimator denominator is {den:.3e}")
    return float(num / den)


def plr_ate(
    outcome_fn: Callable[[np.ndarray], np.ndarray],
    propensity_fn: Callable[[np.ndarray], np.ndarray],
    dataset: Dataset,
    clip: float = PROPENSITY_CLIP,
) -> float:
    """Plug-in partially linear estimate::

        mean((Y - f0(X)) (T - pi(X))) / mean(T (T - pi(X)))

    ``outcome_fn`` returns the untreated outcome prediction and
    ``propensity_fn`` the treatment probability, both as length-n vectors.
    """
    f0 = np.asarray(outcome_fn(dataset.X), dtype=np.float64).ravel()
    pi = np.asarray(propensity_fn(dataset.X), dtype=np.float64).ravel()
    return _ratio(dataset.Y, dataset.T, f0, pi, clip)


def closed_form_ate(model: DonutModel, dataset: Dataset, clip: float = PROPENSITY_CLIP) -> float:
    """Ratio estimator with the model's own ``f_eps(., 0)`` and ``pi``."""
    return plr_ate(
        lambda X: perturbed_outcome(model, X, dataset.T, 0),
        lambda X: propensity(model, X),
        dataset,
        clip,
    )


def estimate(
    model: DonutModel,
    train_data: Dataset,
    eval_X=None,
    scaler: ScalerParams | None = None,
    method: str = "donut",
) -> EstimateReport:
    """Point estimate on ``eval_X`` (default: training covariates) with the
    training-sample residual and ratio cross-check, in original outcome units."""
    X = train_data.X if eval_X is None else eval_X
    psi = donut_ate(model, X)
    cf = closed_form_ate(model, train_data)
    resid = orthogonality_residual(model, train_data)
    if scaler is not None:
        psi, cf = scaler.unscale_effect(psi), scaler.unscale_effect(cf)
        resid = resid * scaler.y_sd
    return EstimateReport(method, psi, resid, cf)


# --------------------------------------------------------------------------
# classical baselines


def _lstsq(A, y, label):
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < A.shape[1]:
        warnings.warn(f"{label}: design matrix is rank deficient ({rank} < {A.shape[1]}); "
                      "using the minimum-norm solution", RuntimeWarning, stacklevel=3)
    return coef


def _rows(dataset: Dataset, split: Split | None):
    return np.arange(dataset.n) if split is None else np.asarray(split.train)


def ols1_ate(dataset: Dataset, split: Split | None = None) -> float:
    """Coefficient on ``T`` in a least-squares fit of ``Y`` on ``[1, X, T]``."""
    idx = _rows(dataset, split)
    A = np.column_stack([np.ones(idx.size), dataset.X[idx], dataset.T[idx]])
    return float(_lstsq(A, dataset.Y[idx], "OLS/LR-1")[-1])


@dataclass
class ArmwiseLinear:
    """Separate linear regressions ``Y ~ 1 + X`` per arm."""

    coef0: np.ndarray
    coef1: np.ndarray

    def predict(self, X, t: int) -> np.ndarray:
        c = self.coef1 if t == 1 else self.coef0
        return c[0] + np.asarray(X) @ c[1:]


def fit_armwise_linear(dataset: Dataset, split: Split | None = None) -> ArmwiseLinear:
    idx = _rows(dataset, split)
    coefs = []
    for arm in (0.0, 1.0):
        rows = idx[dataset.T[idx] == arm]
        if rows.size == 0:
            raise PreconditionError(f"arm T={int(arm)} is empty on the fitting rows")
        A = np.column_stack([np.ones(rows.size), dataset.X[rows]])
        coefs.append(_lstsq(A, dataset.Y[rows], f"OLS/LR-2 arm {int(arm)}"))
    return ArmwiseLinear(*coefs)


def ols2_ate(dataset: Dataset, split: Split | None = None, eval_X=None) -> float:
    """Mean difference of per-arm linear predictions over ``eval_X``
    (default: every row of ``dataset``)."""
    fit = fit_armwise_linear(dataset, split)
    X = dataset.X if eval_X is None else eval_X
    return float(np.mean(fit.predict(X, 1) - fit.predict(X, 0)))


def diff_in_means(dataset: Dataset) -> float:
    treated = dataset.T == 1.0
    if not treated.any() or treated.all():
        raise PreconditionError("difference in means needs both arms")
    return float(dataset.Y[treated].mean() - dataset.Y[~treated].mean())
