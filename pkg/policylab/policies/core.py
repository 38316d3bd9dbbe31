"""
Domain types shared by every policy module: covariates, potential outcomes,
experts, expert classes and trajectories.

Arms are 1-indexed wherever a caller sees them (expert tables, PeriodRecord.arm,
estimate_outcomes) and 0-indexed inside arrays.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DimensionMismatchError, InvariantViolationError

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-12

# Treated arm of a two-arm LES rule, 0-indexed.
TREATED = 1
CONTROL = 0


def _frozen_array(values, dtype=float):
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class CovariateVector:
    """x_t: a finite real vector of length J."""
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values).reshape(-1)
        if values.size == 0:
            raise InvariantViolationError("Covariate vector must have at least one entry")
        if not np.all(np.isfinite(values)):
            raise InvariantViolationError(f"Covariate vector has non-finite entries: {values}")
        object.__setattr__(self, 'values', values)

    @property
    def dim(self):
        return self.values.size

    def augmented(self):
        """(1, xᵀ), the row that defines this subject's hyperplane."""
        return np.concatenate(([1.0], self.values))


@dataclass(frozen=True)
class PotentialOutcomes:
    """y_t(1..K), each in [0, M]."""
    values: np.ndarray
    cap: Optional[float] = None

    def __post_init__(self):
        values = _frozen_array(self.values).reshape(-1)
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise InvariantViolationError(f"Potential outcomes must be finite and nonnegative: {values}")
        if self.cap is not None and np.any(values > self.cap):
            raise InvariantViolationError(f"Potential outcomes {values} exceed the cap M={self.cap}")
        object.__setattr__(self, 'values', values)

    @property
    def n_arms(self):
        return self.values.size


@dataclass(frozen=True)
class ExpertRecommendation:
    """A probability vector over the K arms."""
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen_array(self.probs).reshape(-1)
        check_probability_vector(probs, PROBABILITY_TOLERANCE, what="Expert recommendation")
        object.__setattr__(self, 'probs', probs)


def check_probability_vector(probs, tolerance, what="Probability vector"):
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise InvariantViolationError(f"{what} has negative or non-finite entries: {probs}")
    total = float(np.sum(probs))
    if abs(total - 1.0) > tolerance:
        raise InvariantViolationError(f"{what} sums to {total!r}, not 1")


def point_mass(arm_index, n_arms):
    probs = np.zeros(n_arms)
    probs[arm_index] = 1.0
    return probs


def as_covariates(x, dim=None):
    """Accept a CovariateVector or any array-like and return a float array."""
    values = x.values if isinstance(x, CovariateVector) else np.asarray(x, dtype=float).reshape(-1)
    if dim is not None and values.size != dim:
        raise DimensionMismatchError("Covariate vector", dim, values.size)
    return values


# Experts

class Expert(ABC):
    """A time-invariant map from covariates to a distribution over arms."""

    deterministic = True

    @abstractmethod
    def probabilities(self, x: np.ndarray, n_arms: int) -> np.ndarray:
        raise NotImplementedError

    def arm_index(self, x, n_arms):
        """0-indexed arm of a deterministic expert."""
        if not self.deterministic:
            raise InvariantViolationError(f"{self!r} is randomised and has no single arm")
        return int(np.argmax(self.probabilities(as_covariates(x), n_arms)))


@dataclass(frozen=True)
class LesRule(Expert):
    """
    Linear eligibility score rule: treat (arm 2) iff (1, xᵀ)β ≥ 0, else arm 1.
    The boundary belongs to the treated arm; there is no epsilon band.
    """
    coefficients: Tuple[float, ...]

    def __post_init__(self):
        coefficients = tuple(float(c) for c in np.asarray(self.coefficients, dtype=float).reshape(-1))
        if not coefficients or not all(np.isfinite(coefficients)):
            raise InvariantViolationError(f"LES coefficients must be finite and nonempty: {coefficients}")
        object.__setattr__(self, 'coefficients', coefficients)

    @property
    def dim(self):
        return len(self.coefficients) - 1

    def score(self, x):
        x = as_covariates(x)
        if x.size != self.dim:
            raise DimensionMismatchError("LesRule covariates", self.dim, x.size)
        return self.coefficients[0] + float(np.dot(self.coefficients[1:], x))

    def probabilities(self, x, n_arms):
        if n_arms < 2:
            raise InvariantViolationError("An LES rule needs at least two arms")
        return point_mass(TREATED if self.score(x) >= 0 else CONTROL, n_arms)


@dataclass(frozen=True)
class TableExpert(Expert):
    """
    Lookup rule: covariate key -> arm (1-indexed). Keys are covariate tuples;
    covariates missing from the table fall back to `default` when it is set.
    """
    table: Tuple[Tuple[Tuple[float, ...], int], ...] = ()
    default: Optional[int] = None

    def __post_init__(self):
        entries = self.table.items() if isinstance(self.table, dict) else self.table
        normalised = tuple((tuple(float(v) for v in key), int(arm)) for key, arm in entries)
        object.__setattr__(self, 'table', normalised)
        object.__setattr__(self, '_lookup', dict(normalised))

    def probabilities(self, x, n_arms):
        key = tuple(float(v) for v in as_covariates(x))
        arm = self._lookup.get(key, self.default)
        if arm is None:
            raise InvariantViolationError(f"Covariates {key} are not in the expert table and no default is set")
        if not 1 <= arm <= n_arms:
            raise InvariantViolationError(f"Table arm {arm} is outside 1..{n_arms}")
        return point_mass(arm - 1, n_arms)


@dataclass(frozen=True)
class UniformRandom(Expert):
    """f^random: equal probability on every arm."""
    deterministic = False

    def probabilities(self, x, n_arms):
        return np.full(n_arms, 1.0 / n_arms)


@dataclass(frozen=True)
class CustomExpert(Expert):
    """
    Wraps a user function returning either a 1-indexed arm or a probability vector.
    The function must be a module-level callable to survive the worker pool.
    """
    function: Callable = field(compare=False)
    name: str = 'custom'
    deterministic: bool = True

    def probabilities(self, x, n_arms):
        result = self.function(as_covariates(x))
        if np.isscalar(result):
            arm = int(result)
            if not 1 <= arm <= n_arms:
                raise InvariantViolationError(f"Custom expert '{self.name}' returned arm {arm} outside 1..{n_arms}")
            return point_mass(arm - 1, n_arms)
        return np.asarray(result, dtype=float).reshape(-1)


def constant_expert(arm, n_arms=2):
    """Expert that always recommends `arm` (1-indexed)."""
    if not 1 <= arm <= n_arms:
        raise InvariantViolationError(f"Arm {arm} is outside 1..{n_arms}")
    return TableExpert(default=arm)


def recommend(expert: Expert, x, n_arms: int) -> ExpertRecommendation:
    """f(x_t): the expert's probability vector at covariates x."""
    values = as_covariates(x)
    if not np.all(np.isfinite(values)):
        raise InvariantViolationError(f"Covariates must be finite: {values}")
    probs = expert.probabilities(values, n_arms)
    if probs.size != n_arms:
        raise DimensionMismatchError(f"Recommendation of {expert!r}", n_arms, probs.size)
    return ExpertRecommendation(probs)


# Expert classes

@dataclass(frozen=True)
class ExpertClass:
    """
    Either a finite roster of experts (N = len(experts)) or the LES family over
    J covariates, which stays intensional until it is coarsened.
    """
    experts: Optional[Tuple[Expert, ...]] = None
    les_dim: Optional[int] = None

    def __post_init__(self):
        if (self.experts is None) == (self.les_dim is None):
            raise InvariantViolationError("An expert class is either finite or LES, not both")
        if self.experts is not None:
            experts = tuple(self.experts)
            if not experts:
                raise InvariantViolationError("A finite expert class needs at least one expert")
            object.__setattr__(self, 'experts', experts)
            self._index_les_members()
        elif self.les_dim < 1:
            raise InvariantViolationError(f"LES class needs J >= 1, got {self.les_dim}")

    @classmethod
    def finite(cls, experts: Iterable[Expert]):
        return cls(experts=tuple(experts))

    @classmethod
    def les(cls, dim: int):
        return cls(les_dim=int(dim))

    def _index_les_members(self):
        les_positions = [i for i, e in enumerate(self.experts) if isinstance(e, LesRule)]
        dims = {self.experts[i].dim for i in les_positions}
        if len(dims) > 1:
            raise DimensionMismatchError("LES members of one roster", min(dims), max(dims))
        coefficients = (np.array([self.experts[i].coefficients for i in les_positions])
                        if les_positions else np.zeros((0, 0)))
        object.__setattr__(self, '_les_positions', np.array(les_positions, dtype=int))
        object.__setattr__(self, '_les_coefficients', coefficients)
        object.__setattr__(self, '_other_positions',
                           [i for i in range(len(self.experts)) if not isinstance(self.experts[i], LesRule)])

    @property
    def is_finite(self):
        return self.experts is not None

    @property
    def size(self):
        return len(self.experts) if self.is_finite else None

    @property
    def vc_dimension(self):
        """D = J + 1 for the LES family."""
        return None if self.is_finite else self.les_dim + 1

    def has_uniform_member(self):
        return self.is_finite and any(isinstance(e, UniformRandom) for e in self.experts)

    def recommendations(self, x, n_arms) -> np.ndarray:
        """N x K matrix whose row i is f^i(x)."""
        if not self.is_finite:
            raise InvariantViolationError("The LES class must be coarsened before it can recommend")
        x = as_covariates(x)
        matrix = np.empty((len(self.experts), n_arms))
        if self._les_positions.size:
            if self._les_coefficients.shape[1] != x.size + 1:
                raise DimensionMismatchError("LES roster covariates", self._les_coefficients.shape[1] - 1, x.size)
            treated = (self._les_coefficients[:, 0] + self._les_coefficients[:, 1:] @ x) >= 0
            rows = np.zeros((treated.size, n_arms))
            rows[treated, TREATED] = 1.0
            rows[~treated, CONTROL] = 1.0
            matrix[self._les_positions] = rows
        for i in self._other_positions:
            matrix[i] = recommend(self.experts[i], x, n_arms).probs
        return matrix


# Trajectories

@dataclass(frozen=True)
class PeriodRecord:
    t: int
    x: np.ndarray
    p: np.ndarray
    arm: int
    realized: float
    counterfactuals: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Trajectory:
    """
    Per-period record of one run. Arrays are read-only; `arm_indices` are
    0-indexed, `arms` and PeriodRecord.arm are 1-indexed. `seed` is the
    policy-stream seed from which the arm draws can be replayed.
    """
    covariates: np.ndarray
    probs: np.ndarray
    arm_indices: np.ndarray
    realized: np.ndarray
    counterfactuals: Optional[np.ndarray] = None
    phase_boundary: Optional[int] = None
    seed: object = None

    def __post_init__(self):
        covariates = _frozen_array(self.covariates)
        if covariates.ndim == 1:
            covariates = covariates.reshape(len(self.arm_indices), -1)
        object.__setattr__(self, 'covariates', covariates)
        object.__setattr__(self, 'probs', _frozen_array(self.probs))
        object.__setattr__(self, 'arm_indices', _frozen_array(self.arm_indices, dtype=int))
        object.__setattr__(self, 'realized', _frozen_array(self.realized))
        if self.counterfactuals is not None:
            object.__setattr__(self, 'counterfactuals', _frozen_array(self.counterfactuals))
        self._validate()

    def _validate(self):
        T = self.arm_indices.size
        if self.probs.shape[0] != T or self.realized.size != T:
            raise InvariantViolationError("Trajectory arrays disagree on the number of periods")
        K = self.probs.shape[1]
        if T and (self.arm_indices.min() < 0 or self.arm_indices.max() >= K):
            raise InvariantViolationError(f"Pulled arms must lie in 1..{K}")
        if T and np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-10:
            raise InvariantViolationError("Every assignment vector must sum to 1")
        if self.counterfactuals is not None:
            if self.counterfactuals.shape != (T, K):
                raise DimensionMismatchError("Counterfactual table", (T, K), self.counterfactuals.shape)
            taken = self.counterfactuals[np.arange(T), self.arm_indices]
            if not np.array_equal(taken, self.realized):
                raise InvariantViolationError("Realized outcomes must equal the counterfactual of the pulled arm")
        if self.phase_boundary is not None and not 0 <= self.phase_boundary <= T:
            raise InvariantViolationError(f"Phase boundary {self.phase_boundary} outside 0..{T}")

    @property
    def n_periods(self):
        return int(self.arm_indices.size)

    @property
    def n_arms(self):
        return int(self.probs.shape[1])

    @property
    def dim(self):
        return int(self.covariates.shape[1])

    @property
    def arms(self):
        return self.arm_indices + 1

    @property
    def has_counterfactuals(self):
        return self.counterfactuals is not None

    @property
    def periods(self):
        return [
            PeriodRecord(
                t=t + 1,
                x=self.covariates[t],
                p=self.probs[t],
                arm=int(self.arm_indices[t]) + 1,
                realized=float(self.realized[t]),
                counterfactuals=None if self.counterfactuals is None else self.counterfactuals[t],
            )
            for t in range(self.n_periods)
        ]

    def slice(self, start, stop):
        """Periods start+1..stop (1-indexed, inclusive) as a new trajectory."""
        return Trajectory(
            covariates=self.covariates[start:stop],
            probs=self.probs[start:stop],
            arm_indices=self.arm_indices[start:stop],
            realized=self.realized[start:stop],
            counterfactuals=None if self.counterfactuals is None else self.counterfactuals[start:stop],
            seed=self.seed,
        )

    @classmethod
    def from_periods(cls, periods: Sequence[PeriodRecord], phase_boundary=None, seed=None):
        periods = list(periods)
        if [p.t for p in periods] != list(range(1, len(periods) + 1)):
            raise InvariantViolationError("Periods must be contiguous and in arrival order starting at t=1")
        has_cf = bool(periods) and all(p.counterfactuals is not None for p in periods)
        return cls(
            covariates=np.array([p.x for p in periods], dtype=float),
            probs=np.array([p.p for p in periods], dtype=float),
            arm_indices=np.array([p.arm - 1 for p in periods], dtype=int),
            realized=np.array([p.realized for p in periods], dtype=float),
            counterfactuals=np.array([p.counterfactuals for p in periods]) if has_cf else None,
            phase_boundary=phase_boundary,
            seed=seed,
        )


class TrajectoryBuilder:
    """Accumulates periods during a run; `build` freezes them into a Trajectory."""

    def __init__(self, keep_counterfactuals=True):
        self.keep_counterfactuals = keep_counterfactuals
        self._x, self._p, self._arm, self._realized, self._cf = [], [], [], [], []

    def __len__(self):
        return len(self._arm)

    def append(self, x, p, arm_index, outcomes):
        self._x.append(np.asarray(x, dtype=float))
        self._p.append(np.asarray(p, dtype=float))
        self._arm.append(int(arm_index))
        self._realized.append(float(outcomes[arm_index]))
        if self.keep_counterfactuals:
            self._cf.append(np.asarray(outcomes, dtype=float))

    def build(self, phase_boundary=None, seed=None):
        return Trajectory(
            covariates=np.array(self._x),
            probs=np.array(self._p),
            arm_indices=np.array(self._arm, dtype=int),
            realized=np.array(self._realized),
            counterfactuals=np.array(self._cf) if self.keep_counterfactuals else None,
            phase_boundary=phase_boundary,
            seed=seed,
        )


# Random streams

@dataclass(frozen=True)
class ReplicationSeeds:
    """Independent seed sequences for one replication's covariate, noise and policy streams."""
    covariates: np.random.SeedSequence
    noise: np.random.SeedSequence
    policy: np.random.SeedSequence


def replication_seeds(base_seed: int, replication: int, fixed_covariate_seed: Optional[int] = None):
    """
    Split `base_seed` into the streams of replication `replication`. The split
    depends only on (base_seed, replication), never on the replication count.
    """
    root = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(replication),))
    covariates, noise, policy = root.spawn(3)
    if fixed_covariate_seed is not None:
        covariates = np.random.SeedSequence(entropy=int(fixed_covariate_seed))
    return ReplicationSeeds(covariates=covariates, noise=noise, policy=policy)


def policy_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def sample_arm(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw with a single uniform; returns a 0-indexed arm."""
    u = rng.random()
    index = int(np.searchsorted(np.cumsum(probs), u, side='right'))
    return min(index, probs.size - 1)


def replay_arms(probs: np.ndarray, seed) -> np.ndarray:
    """Re-draw the arm sequence implied by stored assignment vectors and a policy seed."""
    rng = policy_rng(seed)
    return np.array([sample_arm(p, rng) for p in np.asarray(probs, dtype=float)], dtype=int)


# Environments

class Environment(ABC):
    """
    Source of (x_t, y_t) pairs in arrival order. Implementations own their
    random streams, so iterating `periods()` twice yields the same data.
    """

    reveals_counterfactuals = True

    @property
    @abstractmethod
    def n_arms(self) -> int:
        raise NotImplementedError

    @property
    @abstractmethod
    def dim(self) -> int:
        raise NotImplementedError

    @property
    @abstractmethod
    def n_periods(self) -> int:
        raise NotImplementedError

    @property
    @abstractmethod
    def outcome_cap(self) -> float:
        raise NotImplementedError

    @abstractmethod
    def periods(self) -> Iterable[Tuple[np.ndarray, np.ndarray]]:
        raise NotImplementedError
