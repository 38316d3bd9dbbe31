"""
Environments feeding covariates and potential outcomes to the policies:
the synthetic log-normal design, CSV-backed tables, and the difficulty metric.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from policies.conf import get_setting
from policies.core import (
    CONTROL,
    TREATED,
    CovariateVector,
    Environment,
    LesRule,
    PotentialOutcomes,
    TableExpert,
    UniformRandom,
    as_covariates,
    recommend,
    replication_seeds,
)
from policies.exceptions import InvariantViolationError, TabularDataError

logger = logging.getLogger(__name__)

MIN_DIFFICULTY_DRAWS = 10 ** 5


def _lognormal_outcomes(x, u, sigma):
    """Columns (y0, y1): control is exp(u0 − σ²/2), treated exp(x1 − x2 + u1 − σ²/2)."""
    x = np.atleast_2d(x)
    u = np.atleast_2d(u)
    drift = sigma * sigma / 2.0
    y0 = np.exp(u[:, 0] - drift)
    y1 = np.exp(x[:, 0] - x[:, 1] + u[:, 1] - drift)
    return np.column_stack([y0, y1])


def _conditional_means(x):
    """E[y | x] per arm: 1 for control, e^{x1−x2} for treated."""
    x = np.atleast_2d(x)
    return np.column_stack([np.ones(x.shape[0]), np.exp(x[:, 0] - x[:, 1])])


def _assignment_matrix(expert, X, n_arms=2):
    """Rows f(x) for every row of X, vectorised for LES and uniform experts."""
    if isinstance(expert, LesRule):
        beta = np.asarray(expert.coefficients)
        if beta.size != X.shape[1] + 1:
            raise InvariantViolationError(f"LES rule of dimension {beta.size - 1} applied to {X.shape[1]} covariates")
        treated = beta[0] + X @ beta[1:] >= 0
        matrix = np.zeros((X.shape[0], n_arms))
        matrix[treated, TREATED] = 1.0
        matrix[~treated, CONTROL] = 1.0
        return matrix
    if isinstance(expert, UniformRandom):
        return np.full((X.shape[0], n_arms), 1.0 / n_arms)
    if isinstance(expert, TableExpert) and not expert.table and expert.default is not None:
        return np.tile(recommend(expert, X[0], n_arms).probs, (X.shape[0], 1))
    return np.array([recommend(expert, x, n_arms).probs for x in X])


@dataclass(frozen=True)
class WelfareEstimate:
    """Per-period population welfare E_P[f(x)ᵀy] with its Monte Carlo standard error."""
    mean: float
    standard_error: float
    n_draws: int


@dataclass(frozen=True)
class LogNormalDesign:
    """
    Synthetic design with covariates uniform on the unit square and
    log-normal potential outcomes with noise scale σ. With
    `fixed_covariate_seed` set, every replication sees the same covariates and
    only the outcome noise varies.
    """
    sigma: float
    n_periods: int
    fixed_covariate_seed: Optional[int] = None
    normalization_cap: Optional[float] = None

    def __post_init__(self):
        if not self.sigma >= 0 or not math.isfinite(self.sigma):
            raise InvariantViolationError(f"sigma must be finite and >= 0, got {self.sigma}")
        if self.n_periods < 1:
            raise InvariantViolationError(f"n_periods must be >= 1, got {self.n_periods}")
        if self.normalization_cap is not None and not self.normalization_cap > 0:
            raise InvariantViolationError(f"normalization_cap must be positive, got {self.normalization_cap}")

    @property
    def covariate_mode(self):
        return 'fresh' if self.fixed_covariate_seed is None else 'fixed'

    def population_welfare(self, experts, n_mc=None, seed=0) -> List[WelfareEstimate]:
        """
        Monte Carlo over covariates of f(x)ᵀE[y | x] for each expert, using the
        same covariate draws for every expert.
        """
        n_mc = get_setting('POPULATION_MC_DRAWS') if n_mc is None else int(n_mc)
        X = np.random.default_rng(seed).random((n_mc, 2))
        means = _conditional_means(X)
        estimates = []
        for expert in experts:
            values = np.einsum('ij,ij->i', _assignment_matrix(expert, X), means)
            estimates.append(WelfareEstimate(
                mean=float(values.mean()),
                standard_error=float(values.std(ddof=1) / math.sqrt(n_mc)),
                n_draws=n_mc,
            ))
        return estimates

    @staticmethod
    def first_best_welfare():
        """E[max(e^{x1−x2}, 1)] = e − 3/2, attained by treating iff x1 ≥ x2."""
        return math.e - 1.5


def draw_lognormal(design: LogNormalDesign, t: int, covariate_rng: np.random.Generator,
                   noise_rng: np.random.Generator):
    """One period of the log-normal design; arm 1 is control (y0), arm 2 treated (y1)."""
    if not 1 <= t <= design.n_periods:
        raise InvariantViolationError(f"Period {t} is outside 1..{design.n_periods}")
    x = covariate_rng.random(2)
    u = noise_rng.normal(0.0, design.sigma, 2)
    outcomes = _lognormal_outcomes(x, u, design.sigma)[0]
    return CovariateVector(x), PotentialOutcomes(outcomes, cap=design.normalization_cap)


class LogNormalEnvironment(Environment):
    """One replication of a LogNormalDesign, materialised from its seed streams."""

    def __init__(self, design: LogNormalDesign, seeds):
        self.design = design
        self.seeds = seeds
        covariate_rng = np.random.default_rng(seeds.covariates)
        noise_rng = np.random.default_rng(seeds.noise)
        self.covariates = covariate_rng.random((design.n_periods, 2))
        noise = noise_rng.normal(0.0, design.sigma, (design.n_periods, 2))
        self.outcomes = _lognormal_outcomes(self.covariates, noise, design.sigma)
        self.covariates.setflags(write=False)
        self.outcomes.setflags(write=False)

    @classmethod
    def for_replication(cls, design: LogNormalDesign, base_seed: int, replication: int):
        return cls(design, replication_seeds(base_seed, replication, design.fixed_covariate_seed))

    @property
    def n_arms(self):
        return 2

    @property
    def dim(self):
        return 2

    @property
    def n_periods(self):
        return self.design.n_periods

    @property
    def max_outcome(self):
        return float(self.outcomes.max())

    @property
    def outcome_cap(self):
        if self.design.normalization_cap is not None:
            return self.design.normalization_cap
        return self.max_outcome

    def periods(self):
        return zip(self.covariates, self.outcomes)

    def population_welfare(self, experts, n_mc=None, seed=0):
        return self.design.population_welfare(experts, n_mc=n_mc, seed=seed)

    def first_best_welfare(self):
        return self.design.first_best_welfare()


@dataclass(frozen=True)
class DifficultyEstimate:
    sigma: float
    probability: float
    standard_error: float
    n_draws: int


def difficulty(sigma: float, n_mc: int = 10 ** 6, seed=0) -> DifficultyEstimate:
    """
    Pr(sign(y1 − y0) ≠ sign(x1 − x2)) under the log-normal design, estimated
    from fresh (x, u) draws. The common −σ²/2 drift cancels, so the sign of
    y1 − y0 is that of x1 − x2 + u1 − u0.
    """
    if n_mc < MIN_DIFFICULTY_DRAWS:
        raise InvariantViolationError(f"Difficulty needs at least {MIN_DIFFICULTY_DRAWS} draws, got {n_mc}")
    if not sigma >= 0:
        raise InvariantViolationError(f"sigma must be >= 0, got {sigma}")
    covariate_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
    x = np.random.default_rng(covariate_seed).random((n_mc, 2))
    u = np.random.default_rng(noise_seed).normal(0.0, sigma, (n_mc, 2))
    index = x[:, 0] - x[:, 1]
    misclassified = np.sign(index + u[:, 1] - u[:, 0]) != np.sign(index)
    probability = float(misclassified.mean())
    return DifficultyEstimate(
        sigma=float(sigma),
        probability=probability,
        standard_error=math.sqrt(probability * (1 - probability) / n_mc),
        n_draws=int(n_mc),
    )


# Tabular data

@dataclass(frozen=True)
class TabularSchema:
    covariates: Sequence[str]
    outcomes: Sequence[str]

    @classmethod
    def from_header(cls, columns):
        """Columns x1..xJ and y1..yK, in numeric order."""
        def numbered(prefix):
            names = [c for c in columns if c.startswith(prefix) and c[len(prefix):].isdigit()]
            return sorted(names, key=lambda c: int(c[len(prefix):]))
        return cls(covariates=numbered('x'), outcomes=numbered('y'))


class TabularEnvironment(Environment):
    """Rows of a prepared potential-outcome table, in file order."""

    def __init__(self, covariates, outcomes, M, shift=0.0, source=None):
        self.covariates = np.asarray(covariates, dtype=float)
        self.outcomes = np.asarray(outcomes, dtype=float)
        self.M = float(M)
        self.shift = float(shift)
        self.source = source
        if self.covariates.shape[0] != self.outcomes.shape[0]:
            raise InvariantViolationError("Covariate and outcome tables differ in length")
        if self.outcomes.shape[1] < 2:
            raise InvariantViolationError("A tabular environment needs at least two outcome columns")

    @property
    def n_arms(self):
        return int(self.outcomes.shape[1])

    @property
    def dim(self):
        return int(self.covariates.shape[1])

    @property
    def n_periods(self):
        return int(self.covariates.shape[0])

    @property
    def outcome_cap(self):
        return self.M

    @property
    def rows(self):
        return [(CovariateVector(x), PotentialOutcomes(y, cap=self.M)) for x, y in zip(self.covariates, self.outcomes)]

    def periods(self):
        return zip(self.covariates, self.outcomes)


def load_tabular(path, schema: Optional[TabularSchema] = None, shift: float = 0.0,
                 M: Optional[float] = None) -> TabularEnvironment:
    """
    Read a CSV of covariates and potential outcomes, add `shift` to every
    outcome and check the [0, M] envelope. Row numbers in errors count data
    rows from 1. Without M the largest shifted outcome is used.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise TabularDataError(f"Could not read {path}: {exc}") from exc
    frame.columns = [c.strip() for c in frame.columns]
    schema = schema or TabularSchema.from_header(frame.columns)
    if not schema.covariates or len(schema.outcomes) < 2:
        raise TabularDataError(f"{path} needs columns x1..xJ and at least y1, y2")
    missing = [c for c in list(schema.covariates) + list(schema.outcomes) if c not in frame.columns]
    if missing:
        raise TabularDataError(f"{path} is missing columns {missing}")

    numeric = {}
    for column in list(schema.covariates) + list(schema.outcomes):
        values = pd.to_numeric(frame[column].str.strip(), errors='coerce')
        bad = np.flatnonzero(values.isna().to_numpy())
        if bad.size:
            raise TabularDataError(f"Non-numeric cell {frame[column].iloc[bad[0]]!r}", row=int(bad[0]) + 1,
                                   column=column)
        numeric[column] = values.to_numpy(dtype=float)

    covariates = np.column_stack([numeric[c] for c in schema.covariates])
    outcomes = np.column_stack([numeric[c] for c in schema.outcomes]) + shift
    finite = np.all(np.isfinite(covariates), axis=1) & np.all(np.isfinite(outcomes), axis=1)
    if not finite.all():
        raise TabularDataError("Non-finite cell", row=int(np.flatnonzero(~finite)[0]) + 1)

    negative = np.flatnonzero(np.any(outcomes < 0, axis=1))
    if negative.size:
        row = int(negative[0])
        raise TabularDataError(f"Outcome {outcomes[row].min()!r} is negative after shift {shift}", row=row + 1)
    cap = float(outcomes.max()) if M is None else float(M)
    if not cap > 0:
        raise TabularDataError(f"Outcome cap M must be positive, got {cap}")
    above = np.flatnonzero(np.any(outcomes > cap, axis=1))
    if above.size:
        row = int(above[0])
        raise TabularDataError(f"Outcome {outcomes[row].max()!r} exceeds M={cap}", row=row + 1)

    logger.info(f"Loaded {len(frame)} rows from {path} (J={covariates.shape[1]}, K={outcomes.shape[1]}, "
                f"shift={shift}, M={cap})")
    return TabularEnvironment(covariates, outcomes, M=cap, shift=shift, source=str(path))


def coarsening_points(env: Environment, n_periods: int) -> np.ndarray:
    """Covariates of the first `n_periods` arrivals."""
    points = []
    for x, _ in env.periods():
        if len(points) == n_periods:
            break
        points.append(as_covariates(x))
    return np.array(points)
