"""Observational datasets: synthetic generation, CSV I/O, splitting, scaling.

The synthetic generator draws control covariates from ``N(0, C)`` and treated
covariates from ``N(mu1, C)`` with ``C = 0.5 * Sigma @ Sigma.T``; outcomes are
linear in the covariates with a homogeneous unit treatment effect.
"""

from __future__ import annotations

import csv
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import (
    GenerationError,
    NumericError,
    ParseError,
    SchemaError,
    SplitError,
    ValidationError,
)

OPTIONAL_COLUMNS = ("mu0", "mu1", "y0", "y1", "e")


@dataclass
class Dataset:
    """Covariates, binary treatment and observed outcome.

    ``mu0``/``mu1`` (expected potential outcomes) and ``y0``/``y1`` (realized
    potential outcomes) are ground truth used only for evaluation. ``e`` flags
    rows that belong to a randomized sub-sample (needed for ATT ground truth).
    """

    X: np.ndarray
    T: np.ndarray
    Y: np.ndarray
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None
    y0: np.ndarray | None = None
    y1: np.ndarray | None = None
    e: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X.reshape(-1, 1)
        self.T = np.asarray(self.T, dtype=np.float64).ravel()
        self.Y = np.asarray(self.Y, dtype=np.float64).ravel()
        n = self.X.shape[0]
        for name in ("T", "Y") + OPTIONAL_COLUMNS:
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.float64).ravel()
            setattr(self, name, v)
            if v.shape[0] != n:
                raise ValidationError(f"{name} has length {v.shape[0]}, expected {n}")
        bad = np.flatnonzero((self.T != 0.0) & (self.T != 1.0))
        if bad.size:
            raise ValidationError(f"treatment must be 0/1; row {bad[0]} has {self.T[bad[0]]!r}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def has_mu(self) -> bool:
        return self.mu0 is not None and self.mu1 is not None

    @property
    def has_potential_outcomes(self) -> bool:
        return self.y0 is not None and self.y1 is not None

    def arm_counts(self) -> tuple[int, int]:
        n1 = int(self.T.sum())
        return self.n - n1, n1

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        kw = {
            name: (None if getattr(self, name) is None else getattr(self, name)[idx])
            for name in ("T", "Y") + OPTIONAL_COLUMNS
        }
        return Dataset(self.X[idx], **kw)

    def check_consistency(self, atol: float = 0.0) -> bool:
        """Observed outcome equals the potential outcome of the received arm."""
        if not self.has_potential_outcomes:
            return True
        expected = np.where(self.T == 1.0, self.y1, self.y0)
        return bool(np.all(np.abs(expected - self.Y) <= atol))


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SimSpec:
    """Parameters of the selection-bias generator.

    ``Sigma`` and ``w`` are drawn from ``seed`` (uniform on (0,1) and (-1,1))
    when left as ``None``; ``mu1`` defaults to the zero vector (no bias).
    ``noise_var`` is the *variance* of the additive Gaussian outcome noise.
    """

    d: int = 10
    n_control: int = 2500
    n_treated: int = 5000
    mu1: np.ndarray | None = None
    Sigma: np.ndarray | None = None
    w: np.ndarray | None = None
    noise_var: float = 0.1
    seed: int | Sequence[int] = 0

    def resolved(self) -> "SimSpec":
        """Copy with ``Sigma``, ``w`` and ``mu1`` filled in deterministically."""
        rng = np.random.default_rng(self.seed)
        # Sigma then w are always consumed so that supplying one does not
        # change the draw of the other.
        sigma_draw = rng.uniform(0.0, 1.0, size=(self.d, self.d))
        w_draw = rng.uniform(-1.0, 1.0, size=self.d)
        Sigma = sigma_draw if self.Sigma is None else np.asarray(self.Sigma, dtype=np.float64)
        w = w_draw if self.w is None else np.asarray(self.w, dtype=np.float64).ravel()
        mu1 = np.zeros(self.d) if self.mu1 is None else np.asarray(self.mu1, dtype=np.float64).ravel()
        if Sigma.shape != (self.d, self.d) or w.shape != (self.d,) or mu1.shape != (self.d,):
            raise GenerationError(
                f"inconsistent dimensions: d={self.d}, Sigma {Sigma.shape}, w {w.shape}, mu1 {mu1.shape}"
            )
        return replace(self, Sigma=Sigma, w=w, mu1=mu1)

    @property
    def covariance(self) -> np.ndarray:
        S = self.resolved().Sigma
        return 0.5 * S @ S.T

    def with_kl(self, target: float) -> "SimSpec":
        """Set ``mu1 = c * ones / sqrt(d)`` with ``c`` chosen so ``kl_bias == target``."""
        spec = self.resolved()
        if target < 0:
            raise ValueError("target KL must be non-negative")
        u = np.ones(spec.d) / np.sqrt(spec.d)
        unit_kl = kl_bias(replace(spec, mu1=u))
        return replace(spec, mu1=np.sqrt(target / unit_kl) * u)


def _sample_stream(seed):
    # separate stream for samples so covariance draws stay fixed when only
    # mu1 changes
    ss = np.random.SeedSequence(seed if isinstance(seed, int) else list(seed))
    return np.random.default_rng(ss.spawn(1)[0])


def simulate(spec: SimSpec) -> Dataset:
    """Draw a dataset with a homogeneous unit effect.

    ``y0 = w.x + noise`` and ``y1 = y0 + 1`` share one noise draw per row.
    Rows are shuffled so treated and control units are interleaved.
    """
    spec = spec.resolved()
    if not (np.all(np.isfinite(spec.Sigma)) and np.all(np.isfinite(spec.mu1)) and np.all(np.isfinite(spec.w))):
        raise GenerationError("non-finite generator parameters")
    if spec.noise_var < 0:
        raise GenerationError("noise variance must be non-negative")
    # C = L L^T with L = Sigma / sqrt(2), so no factorization is needed
    L = spec.Sigma / np.sqrt(2.0)
    rng = _sample_stream(spec.seed)
    n0, n1 = spec.n_control, spec.n_treated
    z = rng.standard_normal((n0 + n1, spec.d))
    X = z @ L.T
    X[n0:] += spec.mu1
    T = np.r_[np.zeros(n0), np.ones(n1)]
    noise = rng.normal(0.0, np.sqrt(spec.noise_var), size=n0 + n1)
    mu0 = X @ spec.w
    mu1 = mu0 + 1.0
    y0 = mu0 + noise
    y1 = y0 + 1.0
    Y = np.where(T == 1.0, y1, y0)
    perm = rng.permutation(n0 + n1)
    return Dataset(X[perm], T[perm], Y[perm], mu0[perm], mu1[perm], y0[perm], y1[perm])


def kl_bias(spec: SimSpec, max_condition: float = 1e12) -> float:
    """KL divergence between the treated and control covariate Gaussians.

    With a shared covariance ``C`` this is ``0.5 * mu1' C^-1 mu1``.
    """
    spec = spec.resolved()
    C = 0.5 * spec.Sigma @ spec.Sigma.T
    cond = np.linalg.cond(C)
    if not np.isfinite(cond) or cond > max_condition:
        raise NumericError(f"covariance is numerically singular (condition number {cond:.3e})")
    sol = np.linalg.solve(C, spec.mu1)
    return 0.5 * float(spec.mu1 @ sol)


# --------------------------------------------------------------------------
# CSV


@dataclass
class CsvSchema:
    """Column mapping for :func:`load_csv`.

    ``covariates=None`` selects every ``x<k>`` column, ordered by ``k``.
    """

    covariates: list[str] | None = None
    treatment: str = "t"
    outcome: str = "y"
    mu0: str = "mu0"
    mu1: str = "mu1"
    y0: str = "y0"
    y1: str = "y1"
    e: str = "e"


_XCOL = re.compile(r"^x(\d+)$")


def load_csv(path, schema: CsvSchema | None = None) -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    Optional ground-truth columns are attached when present.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    if schema.covariates is None:
        xcols = sorted((c for c in header if _XCOL.match(c)), key=lambda c: int(_XCOL.match(c).group(1)))
        if not xcols:
            raise SchemaError(f"{path}: no covariate columns named x1..xd")
    else:
        xcols = list(schema.covariates)
    required = xcols + [schema.treatment, schema.outcome]
    for col in required:
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    pos = {c: i for i, c in enumerate(header)}

    def column(name):
        j = pos[name]
        out = np.empty(len(rows))
        for i, r in enumerate(rows):
            # line numbers are 1-based and count the header
            try:
                out[i] = float(r[j])
            except (ValueError, IndexError):
                cell = r[j] if j < len(r) else ""
                raise ParseError(
                    f"{path}: line {i + 2}, column {name!r}: cannot parse {cell!r} as a number"
                ) from None
        return out

    X = np.column_stack([column(c) for c in xcols]) if rows else np.empty((0, len(xcols)))
    T = column(schema.treatment)
    bad = np.flatnonzero((T != 0.0) & (T != 1.0))
    if bad.size:
        i = bad[0]
        raise ValidationError(
            f"{path}: line {i + 2}: treatment {rows[i][pos[schema.treatment]]!r} is not 0 or 1"
        )
    Y = column(schema.outcome)
    extras = {}
    for key in OPTIONAL_COLUMNS:
        col = getattr(schema, key)
        if col in pos:
            extras[key] = column(col)
    return Dataset(X, T, Y, **extras)


def write_csv(dataset: Dataset, path) -> None:
    """Write ``dataset`` in the format read by :func:`load_csv`."""
    cols = [f"x{j + 1}" for j in range(dataset.d)] + ["t", "y"]
    data = [dataset.X, dataset.T[:, None], dataset.Y[:, None]]
    for key in OPTIONAL_COLUMNS:
        v = getattr(dataset, key)
        if v is not None:
            cols.append(key)
            data.append(v[:, None])
    table = np.hstack(data)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in table:
            w.writerow([repr(float(v)) for v in row])


# --------------------------------------------------------------------------
# splitting and scaling


@dataclass
class Split:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    @property
    def in_sample(self) -> np.ndarray:
        return np.sort(np.r_[self.train, self.validation])

    def parts(self):
        return self.train, self.validation, self.test


def _largest_remainder(total: int, ratios: np.ndarray) -> np.ndarray:
    raw = ratios * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def split(dataset: Dataset, ratios=(0.63, 0.27, 0.10), seed=0) -> Split:
    """Treatment-stratified train/validation/test partition.

    Part sizes follow ``ratios`` by largest-remainder rounding of ``n``. Each
    part receives units of both arms whenever its size and the arm sizes allow.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or ratios[0] <= 0:
        raise SplitError(f"ratios must be three non-negative numbers with train > 0, got {ratios}")
    if abs(ratios.sum() - 1.0) > 1e-6:
        raise SplitError(f"ratios must sum to 1, got {ratios.sum()}")
    n = dataset.n
    treated = np.flatnonzero(dataset.T == 1.0)
    control = np.flatnonzero(dataset.T == 0.0)
    totals = _largest_remainder(n, ratios)
    n_t = np.minimum(_largest_remainder(treated.size, ratios), totals)
    # hand any overflow to parts that still have room
    for _ in range(treated.size - n_t.sum()):
        room = np.flatnonzero(n_t < totals)
        n_t[room[0]] += 1
    n_c = totals - n_t

    # move single units between parts so every part of size >= 2 holds both arms
    for arm, other in ((n_t, n_c), (n_c, n_t)):
        for k in range(3):
            if arm[k] == 0 and totals[k] >= 2:
                donors = [j for j in range(3) if arm[j] >= 2 and other[k] >= 1]
                if donors:
                    j = max(donors, key=lambda j: arm[j])
                    arm[k] += 1
                    other[k] -= 1
                    arm[j] -= 1
                    other[j] += 1
    if n_t[0] == 0 or n_c[0] == 0:
        raise SplitError(
            f"training part would lack a treatment arm (treated={treated.size}, control={control.size})"
        )

    rng = np.random.default_rng(seed)
    treated = rng.permutation(treated)
    control = rng.permutation(control)
    bounds_t = np.r_[0, np.cumsum(n_t)]
    bounds_c = np.r_[0, np.cumsum(n_c)]
    parts = [
        np.sort(np.r_[treated[bounds_t[k]:bounds_t[k + 1]], control[bounds_c[k]:bounds_c[k + 1]]])
        for k in range(3)
    ]
    return Split(*parts)


@dataclass
class ScalerParams:
    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: float
    y_sd: float
    warnings: list[str] = field(default_factory=list)

    def unscale_effect(self, psi):
        """Treatment effects scale with the outcome's sd and ignore its shift."""
        return psi * self.y_sd

    def unscale_outcome(self, y):
        return y * self.y_sd + self.y_mean

    def transform_X(self, X):
        return (X - self.x_mean) / self.x_sd


def standardize(dataset: Dataset, split: Split, min_sd: float = 1e-12) -> tuple[Dataset, ScalerParams]:
    """Center and scale covariates and outcomes with training-part statistics.

    Ground-truth outcome columns are transformed with the outcome's parameters
    so that effects stay comparable after :meth:`ScalerParams.unscale_effect`.
    Zero-variance covariates are passed through unchanged.
    """
    tr = np.asarray(split.train)
    if tr.size == 0:
        raise SplitError("training part is empty")
    notes = []
    x_mean = dataset.X[tr].mean(axis=0)
    x_sd = dataset.X[tr].std(axis=0)
    const = x_sd < min_sd
    if np.any(const):
        for j in np.flatnonzero(const):
            notes.append(f"covariate {j} has zero variance on the training part; left unscaled")
        x_mean = np.where(const, 0.0, x_mean)
        x_sd = np.where(const, 1.0, x_sd)
    y_mean = float(dataset.Y[tr].mean())
    y_sd = float(dataset.Y[tr].std())
    if y_sd < min_sd:
        notes.append("outcome has zero variance on the training part; left unscaled")
        y_mean, y_sd = 0.0, 1.0
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    params = ScalerParams(x_mean, x_sd, y_mean, y_sd, notes)

    def sy(v):
        return None if v is None else (v - y_mean) / y_sd

    out = Dataset(
        params.transform_X(dataset.X),
        dataset.T.copy(),
        sy(dataset.Y),
        sy(dataset.mu0),
        sy(dataset.mu1),
        sy(dataset.y0),
        sy(dataset.y1),
        None if dataset.e is None else dataset.e.copy(),
    )
    return out, params


def replication_seed(master_seed: int, replication: int) -> list[int]:
    """Independent, reproducible seed for one replication."""
    return [int(master_seed), int(replication)]
