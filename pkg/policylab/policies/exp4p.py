"""
F–EXP4.P: exponential weighting over a finite roster of experts with
uniform exploration and regularised inverse propensity weighting.

One run is strictly sequential. Per period:
    1. p = (1-γ)·Σ_i q_i f^i(x) + γ/K
    2. draw the arm from p (single uniform, inverse CDF)
    3. ỹ(k) = (β·M² + y·1(arm=k)) / p(k)
    4. s̃_i = f^i(x)·ỹ, cumulative log-score += η·s̃_i
    5. q = softmax(log-scores), normalised by subtracting the max
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import (
    Environment,
    ExpertClass,
    ExpertRecommendation,
    TrajectoryBuilder,
    policy_rng,
    sample_arm,
)
from .exceptions import (
    DimensionMismatchError,
    EnvironmentExhaustedError,
    HorizonTooShortError,
    InvariantViolationError,
    NonFiniteScoreError,
    OutcomeBoundError,
)

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-10


@dataclass(frozen=True)
class TuningParams:
    """
    (β, γ, η) plus the quantities they were derived from.

    beta and eta are in 1/outcome units, gamma is unitless. `omega` is
    √(ln(N/δ)/K) and `horizon` the number of periods F–EXP4.P runs for.
    """
    beta: float
    gamma: float
    eta: float
    M: float
    N: int
    K: int
    horizon: int
    delta: float
    omega: Optional[float] = None

    def __post_init__(self):
        if not self.M > 0:
            raise InvariantViolationError(f"Outcome cap M must be positive, got {self.M}")
        if not 0 <= self.beta <= 1.0 / self.M * (1 + 1e-12):
            raise InvariantViolationError(f"beta={self.beta} must lie in [0, 1/M]")
        if not 0 <= self.gamma <= 1:
            raise InvariantViolationError(f"gamma={self.gamma} must lie in [0, 1]")
        if not self.eta >= 0:
            raise InvariantViolationError(f"eta={self.eta} must be nonnegative")
        if not 0 < self.delta < 1:
            raise InvariantViolationError(f"delta={self.delta} must lie in (0, 1)")
        if self.horizon < 1 or self.N < 1 or self.K < 2:
            raise InvariantViolationError("Need horizon >= 1, N >= 1 and K >= 2")

    def scaled(self, beta=1.0, gamma=1.0, eta=1.0):
        """Multiply β, γ and η by sensitivity-sweep factors."""
        for name, factor in (('beta', beta), ('gamma', gamma), ('eta', eta)):
            if not factor > 0:
                raise InvariantViolationError(f"Tuning multiplier for {name} must be positive, got {factor}")
        return replace(self, beta=self.beta * beta, gamma=self.gamma * gamma, eta=self.eta * eta)


def minimal_horizon(N, K, delta):
    """Smallest horizon satisfying max(ω², 4K·ln N) ≤ horizon."""
    omega_sq = math.log(N / delta) / K
    return math.ceil(max(omega_sq, 4 * K * math.log(N)))


def compute_tuning(N: int, K: int, horizon: int, M: float, delta: float) -> TuningParams:
    """Closed-form tuning that optimises the high-probability regret bound."""
    if N < 2 or K < 2:
        raise InvariantViolationError(f"Tuning needs N >= 2 and K >= 2, got N={N}, K={K}")
    if not M > 0:
        raise InvariantViolationError(f"Outcome cap M must be positive, got {M}")
    if not 0 < delta < 1:
        raise InvariantViolationError(f"delta must lie in (0, 1), got {delta}")

    needed = minimal_horizon(N, K, delta)
    if horizon < needed:
        raise HorizonTooShortError(
            f"Horizon {horizon} is too short for N={N}, K={K}, delta={delta}", minimal_horizon=needed
        )

    log_n_delta = math.log(N / delta)
    omega = math.sqrt(log_n_delta / K)
    root_h = math.sqrt(horizon)
    ratio = math.sqrt(math.log(N) / log_n_delta)
    return TuningParams(
        beta=omega / (M * root_h),
        gamma=omega * ratio * K / root_h,
        eta=omega * ratio / (2 * M * root_h),
        M=M,
        N=N,
        K=K,
        horizon=horizon,
        delta=delta,
        omega=omega,
    )


def regret_bound(M, K, T, N, delta):
    """7M·√(K·T·ln(N/δ)), exceeded with probability at most δ."""
    return 7 * M * math.sqrt(K * T * math.log(N / delta))


@dataclass(frozen=True)
class ExpertWeights:
    """Cumulative η-scaled scores (max-normalised) and the induced distribution q."""
    log_scores: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if np.any(q < 0) or abs(q.sum() - 1.0) > WEIGHT_TOLERANCE:
            raise InvariantViolationError(f"Expert weights must be a probability vector, got sum {q.sum()!r}")

    @classmethod
    def uniform(cls, n_experts):
        return cls(log_scores=np.zeros(n_experts), q=np.full(n_experts, 1.0 / n_experts))

    @property
    def n_experts(self):
        return self.q.size


def _as_matrix(recs, n_experts=None):
    if isinstance(recs, np.ndarray) and recs.ndim == 2:
        matrix = recs
    else:
        matrix = np.array([r.probs if isinstance(r, ExpertRecommendation) else r for r in recs], dtype=float)
    if n_experts is not None and matrix.shape[0] != n_experts:
        raise DimensionMismatchError("Expert recommendations", n_experts, matrix.shape[0])
    return matrix


def policy_weights(q: ExpertWeights, recs: Union[np.ndarray, Sequence[ExpertRecommendation]], gamma: float) -> np.ndarray:
    """p(k) = (1-γ)·Σ_i f_k^i(x)·q_i + γ/K."""
    matrix = _as_matrix(recs, q.n_experts)
    n_arms = matrix.shape[1]
    return (1.0 - gamma) * (q.q @ matrix) + gamma / n_arms


def _ipw(realized, arm_index, p, beta, M):
    if np.any(p <= 0):
        raise InvariantViolationError(
            f"Assignment probabilities must be positive for inverse weighting, got {p}; check gamma > 0"
        )
    numerator = np.full(p.size, beta * M * M)
    numerator[arm_index] += realized
    return numerator / p


def estimate_outcomes(realized: float, arm: int, p, beta: float, M: float) -> np.ndarray:
    """ỹ(k) = (β·M² + realized·1(arm=k)) / p(k) with `arm` 1-indexed."""
    p = np.asarray(p, dtype=float)
    if not 1 <= arm <= p.size:
        raise InvariantViolationError(f"Arm {arm} is outside 1..{p.size}")
    return _ipw(realized, arm - 1, p, beta, M)


def update_weights(w: ExpertWeights, scores, eta: float) -> ExpertWeights:
    """Add η·scores to the log-scores, shift by the max, and re-normalise."""
    scores = np.asarray(scores, dtype=float)
    if scores.size != w.n_experts:
        raise DimensionMismatchError("Expert scores", w.n_experts, scores.size)
    bad = np.flatnonzero(~np.isfinite(scores))
    if bad.size:
        raise NonFiniteScoreError(int(bad[0]), scores[bad[0]])

    log_scores = w.log_scores + eta * (scores - scores.max())
    log_scores = log_scores - log_scores.max()
    weights = np.exp(log_scores)
    return ExpertWeights(log_scores=log_scores, q=weights / weights.sum())


def check_outcomes(outcomes, cap, period):
    outcomes = np.asarray(outcomes, dtype=float)
    bad = np.flatnonzero(~np.isfinite(outcomes) | (outcomes < 0) | (outcomes > cap))
    if bad.size:
        raise OutcomeBoundError(period, float(outcomes[bad[0]]), cap)
    return outcomes


def run_exploitation_phase(stream, roster: ExpertClass, params: TuningParams, rng, builder: TrajectoryBuilder,
                           first_period: int = 1, on_period: Optional[Callable] = None) -> ExpertWeights:
    """
    Run F–EXP4.P for params.horizon periods drawn from `stream`, appending to
    `builder`. Weights start uniform. Returns the final weights.
    """
    K = params.K
    weights = ExpertWeights.uniform(roster.size)
    for offset in range(params.horizon):
        period = first_period + offset
        try:
            x, outcomes = next(stream)
        except StopIteration:
            raise EnvironmentExhaustedError(period, period - 1) from None
        outcomes = check_outcomes(outcomes, params.M, period)

        recs = roster.recommendations(x, K)
        p = policy_weights(weights, recs, params.gamma)
        arm_index = sample_arm(p, rng)
        y_tilde = _ipw(outcomes[arm_index], arm_index, p, params.beta, params.M)
        weights = update_weights(weights, recs @ y_tilde, params.eta)

        builder.append(x, p, arm_index, outcomes)
        if on_period is not None:
            on_period(period, p, weights)
    return weights


def run_f_exp4p(env: Environment, experts, params: TuningParams, seed, on_period: Optional[Callable] = None):
    """
    Run F–EXP4.P against `env` for params.horizon periods.

    `on_period(t, p, weights)` is called after each update, which is how
    callers snapshot expert weights. Identical seeds give identical trajectories.
    """
    roster = experts if isinstance(experts, ExpertClass) else ExpertClass.finite(experts)
    if roster.size != params.N:
        raise DimensionMismatchError("Expert roster size", params.N, roster.size)
    if env.n_arms != params.K:
        raise DimensionMismatchError("Environment arm count", params.K, env.n_arms)
    if env.n_periods < params.horizon:
        raise EnvironmentExhaustedError(env.n_periods + 1, env.n_periods)
    if not roster.has_uniform_member():
        logger.warning("Expert roster has no uniform random member; the regret guarantee assumes one")

    logger.info(f"F-EXP4.P: N={params.N} K={params.K} horizon={params.horizon} "
                f"beta={params.beta:.6g} gamma={params.gamma:.6g} eta={params.eta:.6g}")
    builder = TrajectoryBuilder(keep_counterfactuals=env.reveals_counterfactuals)
    run_exploitation_phase(iter(env.periods()), roster, params, policy_rng(seed), builder, on_period=on_period)
    return builder.build(seed=seed)
