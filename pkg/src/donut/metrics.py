"""Absolute-error metrics for average effects."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .datasets import Dataset
from .exceptions import DimensionError, PreconditionError


@dataclass(frozen=True)
class MetricResult:
    name: Literal["eps_ate_mu", "eps_ate_y", "eps_att"]
    value: float
    scope: Literal["in_sample", "out_sample"]


def _vectors(*vs):
    out = [np.asarray(v, dtype=np.float64).ravel() for v in vs]
    if len({v.shape[0] for v in out}) != 1:
        raise DimensionError(f"length mismatch: {[v.shape[0] for v in out]}")
    return out


def eps_ate_mu(true_mu0, true_mu1, pred0, pred1) -> float:
    """|mean(mu1 - mu0) - mean(pred1 - pred0)| against expected outcomes."""
    m0, m1, p0, p1 = _vectors(true_mu0, true_mu1, pred0, pred1)
    return float(abs(np.mean(m1 - m0) - np.mean(p1 - p0)))


def eps_ate_y(y0, y1, pred0, pred1) -> float:
    """Same as :func:`eps_ate_mu` against realized potential outcomes."""
    if y0 is None or y1 is None:
        raise PreconditionError("realized potential outcomes y0/y1 are required")
    a0, a1, p0, p1 = _vectors(y0, y1, pred0, pred1)
    return float(abs(np.mean(a1 - a0) - np.mean(p1 - p0)))


def att_ground_truth(dataset: Dataset, randomized_flags) -> float:
    """Treated mean outcome minus the mean over randomized controls."""
    e = np.asarray(randomized_flags, dtype=bool).ravel()
    treated = dataset.T == 1.0
    controls = (~treated) & e
    if not treated.any() or not controls.any():
        raise PreconditionError("ATT needs treated units and randomized controls")
    return float(dataset.Y[treated].mean() - dataset.Y[controls].mean())


def eps_att(dataset: Dataset, randomized_flags, pred0, pred1) -> float:
    """|ATT - mean predicted effect over the treated|."""
    p0, p1 = _vectors(pred0, pred1)
    if p0.shape[0] != dataset.n:
        raise DimensionError(f"predictions have length {p0.shape[0]}, dataset has {dataset.n}")
    att = att_ground_truth(dataset, randomized_flags)
    treated = dataset.T == 1.0
    return float(abs(att - np.mean(p1[treated] - p0[treated])))
