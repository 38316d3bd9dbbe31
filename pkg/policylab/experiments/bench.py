"""
Benchmark policies (oracle rule, τ-EWM, treat everyone, treat no-one) and the
welfare, regret and classification metrics every estimator is reported with.
"""
import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from policies.arrangement import enumerate_cells
from policies.core import (
    CONTROL,
    TREATED,
    Environment,
    Expert,
    LesRule,
    TrajectoryBuilder,
    policy_rng,
    recommend,
    sample_arm,
)
from policies.exceptions import (
    EnvironmentExhaustedError,
    InvariantViolationError,
    MissingCounterfactualsError,
)
from policies.exp4p import check_outcomes
from policies.vcexp4p import LogArg, Les, compute_tau, run_coarsening_phase

logger = logging.getLogger(__name__)

# LES rules are scored in blocks of this many experts.
WELFARE_CHUNK = 4096


class PolicyKind(enum.Enum):
    TREAT_ALL = 'treat_all'
    TREAT_NONE = 'treat_none'
    ORACLE_LOGNORMAL = 'oracle_lognormal'
    CUSTOM = 'custom'


def fixed_policy(kind, dim: int = 2, expert: Optional[Expert] = None) -> Expert:
    """The deterministic expert behind each fixed benchmark."""
    kind = PolicyKind(kind)
    if kind is PolicyKind.TREAT_ALL:
        return LesRule((1.0,) + (0.0,) * dim)
    if kind is PolicyKind.TREAT_NONE:
        return LesRule((-1.0,) + (0.0,) * dim)
    if kind is PolicyKind.ORACLE_LOGNORMAL:
        if dim != 2:
            raise InvariantViolationError(f"The log-normal oracle rule needs J=2, got {dim}")
        return LesRule((0.0, 1.0, -1.0))
    if expert is None:
        raise InvariantViolationError("A custom fixed policy needs an expert")
    return expert


def _require_counterfactuals(traj, metric):
    if not traj.has_counterfactuals:
        raise MissingCounterfactualsError(metric)


def assignment_matrix(expert: Expert, covariates: np.ndarray, n_arms: int) -> np.ndarray:
    """T x K matrix of f(x_t)."""
    if isinstance(expert, LesRule):
        treated = expert.coefficients[0] + covariates @ np.asarray(expert.coefficients[1:]) >= 0
        matrix = np.zeros((covariates.shape[0], n_arms))
        matrix[treated, TREATED] = 1.0
        matrix[~treated, CONTROL] = 1.0
        return matrix
    return np.array([recommend(expert, x, n_arms).probs for x in covariates]).reshape(-1, n_arms)


def expert_welfares(traj, experts: Sequence[Expert]) -> np.ndarray:
    """Ŵ_T(f) for every expert, with LES rules scored in vectorised blocks."""
    _require_counterfactuals(traj, "Empirical welfare")
    experts = list(experts)
    y = traj.counterfactuals
    welfares = np.empty(len(experts))
    les = [i for i, e in enumerate(experts) if isinstance(e, LesRule)]
    if les:
        augmented = np.column_stack([np.ones(traj.n_periods), traj.covariates])
        base = y[:, CONTROL].sum()
        gain = y[:, TREATED] - y[:, CONTROL]
        for start in range(0, len(les), WELFARE_CHUNK):
            block = les[start:start + WELFARE_CHUNK]
            coefficients = np.array([experts[i].coefficients for i in block])
            treated = (coefficients @ augmented.T) >= 0
            welfares[block] = base + treated @ gain
    for i, expert in enumerate(experts):
        if not isinstance(expert, LesRule):
            welfares[i] = float(np.sum(assignment_matrix(expert, traj.covariates, traj.n_arms) * y))
    return welfares


def empirical_welfare(traj, expert: Expert) -> float:
    """Ŵ_T(f) = Σ_t f(x_t)ᵀ y_t."""
    return float(expert_welfares(traj, [expert])[0])


def empirical_regret(traj, experts: Sequence[Expert]) -> float:
    """max_f Ŵ_T(f) − Σ_t y_t(k_t)."""
    experts = list(experts)
    if not experts:
        raise InvariantViolationError("Empirical regret needs at least one expert")
    return float(expert_welfares(traj, experts).max() - traj.realized.sum())


@dataclass(frozen=True)
class PopulationRegret:
    value: float
    standard_error: float
    best_index: int
    best_welfare: float


def regret_vs_population(traj, experts: Sequence[Expert], oracle: Callable) -> PopulationRegret:
    """
    T·max_f E_P[f(x)ᵀy] − Σ_t y_t(k_t). `oracle(experts)` returns per-period
    WelfareEstimate objects, e.g. LogNormalEnvironment.population_welfare.
    """
    experts = list(experts)
    if not experts:
        raise InvariantViolationError("Population regret needs at least one expert")
    estimates = oracle(experts)
    means = np.array([e.mean for e in estimates])
    best = int(np.argmax(means))
    T = traj.n_periods
    return PopulationRegret(
        value=float(T * means[best] - traj.realized.sum()),
        standard_error=float(T * estimates[best].standard_error),
        best_index=best,
        best_welfare=float(T * means[best]),
    )


def correct_classification_series(traj, reference: Expert) -> np.ndarray:
    """Per period Σ_k p_t(k)·1(k = reference arm at x_t)."""
    if not reference.deterministic:
        raise InvariantViolationError("The reference rule must be deterministic")
    arms = np.argmax(assignment_matrix(reference, traj.covariates, traj.n_arms), axis=1)
    return traj.probs[np.arange(traj.n_periods), arms]


def tau_ewm_scores(coarse_traj, candidates: Sequence[Expert], use_counterfactuals=False) -> np.ndarray:
    """
    Empirical welfare of each candidate on the coarsening periods: the IPW sum
    Σ y_t(k_t)·1(g(x_t) = k_t) / p_t(k_t), or with `use_counterfactuals` the
    direct sum Σ y_t(g(x_t)) a simulator can compute.
    """
    candidates = list(candidates)
    if not candidates:
        raise InvariantViolationError("tau-EWM needs at least one candidate")
    if use_counterfactuals:
        return expert_welfares(coarse_traj, candidates)
    T = coarse_traj.n_periods
    taken = coarse_traj.probs[np.arange(T), coarse_traj.arm_indices]
    weighted = coarse_traj.realized / taken
    scores = np.empty(len(candidates))
    for i, candidate in enumerate(candidates):
        agrees = np.argmax(assignment_matrix(candidate, coarse_traj.covariates, coarse_traj.n_arms), axis=1)
        scores[i] = weighted[agrees == coarse_traj.arm_indices].sum()
    return scores


def tau_ewm(coarse_traj, candidates: Sequence[Expert], use_counterfactuals=False) -> Expert:
    """Candidate with the highest coarsening-phase empirical welfare; ties go to the lowest index."""
    candidates = list(candidates)
    scores = tau_ewm_scores(coarse_traj, candidates, use_counterfactuals=use_counterfactuals)
    return candidates[int(np.argmax(scores))]


def nearest_candidate(candidates: Sequence[Expert], reference: Expert, points) -> tuple:
    """(index, disagreements) of the candidate that differs least from `reference` on `points`."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    target = np.argmax(assignment_matrix(reference, points, 2), axis=1)
    counts = [int(np.sum(np.argmax(assignment_matrix(c, points, 2), axis=1) != target)) for c in candidates]
    if not counts:
        raise InvariantViolationError("nearest_candidate needs at least one candidate")
    best = int(np.argmin(counts))
    return best, counts[best]


def _follow_rule(stream, expert, n_periods, n_arms, rng, builder, cap, first_period=1):
    for offset in range(n_periods):
        period = first_period + offset
        try:
            x, outcomes = next(stream)
        except StopIteration:
            raise EnvironmentExhaustedError(period, period - 1) from None
        outcomes = check_outcomes(outcomes, cap, period)
        p = recommend(expert, x, n_arms).probs
        builder.append(x, p, sample_arm(p, rng), outcomes)


def run_fixed_policy(env: Environment, expert: Expert, seed, n_periods: Optional[int] = None):
    """Assign every period by `expert` alone."""
    n_periods = env.n_periods if n_periods is None else n_periods
    if env.n_periods < n_periods:
        raise EnvironmentExhaustedError(env.n_periods + 1, env.n_periods)
    builder = TrajectoryBuilder(keep_counterfactuals=env.reveals_counterfactuals)
    _follow_rule(iter(env.periods()), expert, n_periods, env.n_arms, policy_rng(seed), builder, env.outcome_cap)
    return builder.build(seed=seed)


@dataclass(frozen=True)
class TauEwmResult:
    trajectory: object
    chosen: Expert
    chosen_index: int
    catalog: object
    tau_ceil: int


def run_tau_ewm(env: Environment, J: int, T: int, delta: float, seed, log_arg=LogArg.TWO_OVER_DELTA,
                catalog=None, use_counterfactuals=False, workers=None) -> TauEwmResult:
    """
    Uniform randomisation for ⌈τ⌉ periods, then commit to the coarsened rule
    with the best empirical welfare. With the same seed the coarsening-phase
    arms match those of a VC–EXP4.P run.
    """
    if env.n_periods < T:
        raise EnvironmentExhaustedError(env.n_periods + 1, env.n_periods)
    plan = compute_tau(T, Les(J), delta, log_arg)
    rng = policy_rng(seed)
    stream = iter(env.periods())
    builder = TrajectoryBuilder(keep_counterfactuals=env.reveals_counterfactuals)
    points, _ = run_coarsening_phase(stream, plan.tau_ceil, env.n_arms, rng, builder, cap=env.outcome_cap)

    if catalog is None:
        catalog = enumerate_cells(points, J, workers=workers)
    candidates = catalog.experts()
    coarse = builder.build()
    scores = tau_ewm_scores(coarse, candidates, use_counterfactuals=use_counterfactuals)
    chosen_index = int(np.argmax(scores))
    chosen = candidates[chosen_index]
    logger.info(f"tau-EWM chose cell {chosen_index} of {len(candidates)} after {plan.tau_ceil} periods")

    _follow_rule(stream, chosen, plan.run_length, env.n_arms, rng, builder, env.outcome_cap,
                 first_period=plan.tau_ceil + 1)
    return TauEwmResult(
        trajectory=builder.build(phase_boundary=plan.tau_ceil, seed=seed),
        chosen=chosen,
        chosen_index=chosen_index,
        catalog=catalog,
        tau_ceil=plan.tau_ceil,
    )


@dataclass
class WelfareReport:
    """
    Welfare and regret of one estimator on one replication. Optional fields
    stay None when the trajectory has no counterfactuals or the environment
    has no population oracle.
    """
    estimator: str
    replication: int
    n_periods: int
    n_arms: int
    empirical_welfare: float
    policy_welfare: Optional[float] = None
    average_welfare: Optional[float] = None
    empirical_regret: Optional[float] = None
    regret: Optional[float] = None
    regret_standard_error: Optional[float] = None
    phase_boundary: Optional[int] = None
    per_phase: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    correct_classification: Optional[List[float]] = None
    metadata: Dict[str, object] = field(default_factory=dict)


def _phase_figures(traj, roster):
    figures = {'empirical_welfare': float(traj.realized.sum()), 'empirical_regret': None}
    if roster and traj.has_counterfactuals and traj.n_periods:
        figures['empirical_regret'] = empirical_regret(traj, roster)
    return figures


def welfare_report(traj, estimator: str, replication: int = 0, roster: Optional[Sequence[Expert]] = None,
                   oracle: Optional[Callable] = None, reference: Optional[Expert] = None,
                   metadata: Optional[dict] = None,
                   population_roster: Optional[Sequence[Expert]] = None) -> WelfareReport:
    """
    Collect every metric the trajectory supports. `roster` is the expert class
    empirical regret is measured against; `oracle` maps experts to population
    welfare estimates over `population_roster` (default: `roster`);
    `reference` drives the correct-classification series.
    """
    roster = list(roster) if roster else []
    population_roster = list(population_roster) if population_roster else roster
    report = WelfareReport(
        estimator=estimator,
        replication=replication,
        n_periods=traj.n_periods,
        n_arms=traj.n_arms,
        empirical_welfare=float(traj.realized.sum()),
        phase_boundary=traj.phase_boundary,
        metadata=dict(metadata or {}),
    )
    if traj.has_counterfactuals:
        report.policy_welfare = float(np.sum(traj.probs * traj.counterfactuals))
        if roster:
            report.empirical_regret = empirical_regret(traj, roster)
    if oracle is not None and population_roster:
        population = regret_vs_population(traj, population_roster, oracle)
        report.average_welfare = population.best_welfare
        report.regret = population.value
        report.regret_standard_error = population.standard_error
    if traj.phase_boundary is not None:
        boundary = traj.phase_boundary
        report.per_phase = {
            'coarsening': _phase_figures(traj.slice(0, boundary), roster),
            'run': _phase_figures(traj.slice(boundary, traj.n_periods), roster),
        }
    if reference is not None:
        report.correct_classification = correct_classification_series(traj, reference).tolist()
    return report
