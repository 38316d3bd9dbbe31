"""
VC–EXP4.P: a uniform-exploration coarsening phase of ⌈τ⌉ periods, coarsening
of the LES class on the covariates seen so far, then F–EXP4.P over the cells
plus the uniform random expert for the remaining T − ⌈τ⌉ periods.

Coarsening-phase outcomes never enter the expert scores; the run phase starts
from uniform weights.
"""
import enum
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .arrangement import CellCatalog, coarsen_les, deduplicate, enumerate_cells, harding
from .conf import get_setting
from .core import Environment, ExpertClass, TrajectoryBuilder, policy_rng, sample_arm
from .exceptions import (
    DegenerateCoarseningError,
    DimensionMismatchError,
    EnvironmentExhaustedError,
    HorizonTooShortError,
    InvariantViolationError,
)
from .exp4p import TuningParams, check_outcomes, compute_tuning, run_exploitation_phase

logger = logging.getLogger(__name__)


class LogArg(enum.Enum):
    """Which constant c_δ enters the τ formula as ln(c_δ)."""
    TWO_OVER_DELTA = 'two_over_delta'
    THREE_OVER_DELTA = 'three_over_delta'

    def constant(self, delta):
        return (2.0 if self is LogArg.TWO_OVER_DELTA else 3.0) / delta


class CapMode(enum.Enum):
    ORACLE = 'oracle'
    PLUGIN = 'plugin'


@dataclass(frozen=True)
class Vc:
    """Generic class of VC dimension D."""
    D: int

    def __post_init__(self):
        if self.D < 1:
            raise InvariantViolationError(f"VC dimension must be >= 1, got {self.D}")


@dataclass(frozen=True)
class Les:
    """LES class over J covariates (VC dimension J + 1)."""
    J: int

    def __post_init__(self):
        if self.J < 1:
            raise InvariantViolationError(f"LES class needs J >= 1, got {self.J}")


@dataclass(frozen=True)
class PhasePlan:
    tau_raw: float
    tau_ceil: int
    run_length: int
    T: int
    delta: float
    log_arg: LogArg
    complexity: Union[Vc, Les]

    def __post_init__(self):
        if not 0 < self.tau_ceil < self.T or self.run_length != self.T - self.tau_ceil:
            raise InvariantViolationError(
                f"Phase plan needs 0 < ceil(tau) < T, got ceil(tau)={self.tau_ceil}, T={self.T}"
            )


def sauer_bound(t, D):
    """(t·e/D)^D, the Sauer–Shelah bound on the patterns a VC-D class induces on t points."""
    return (t * math.e / D) ** D


def minimum_horizon_ok(N, delta, T):
    """max(8·ln N, 2·ln N + ln(2/δ)) ≤ T."""
    log_n = math.log(N)
    return max(8 * log_n, 2 * log_n + math.log(2 / delta)) <= T


def vc_regret_scale(M, tau_ceil, T, delta):
    """M·√(⌈τ⌉² + T·ln(3/δ)); the VC–EXP4.P regret bound up to its universal constant."""
    return M * math.sqrt(tau_ceil ** 2 + T * math.log(3 / delta))


def compute_tau(T: int, complexity: Union[Vc, Les], delta: float,
                log_arg: LogArg = LogArg.TWO_OVER_DELTA) -> PhasePlan:
    """
    Length of the coarsening phase:
        Vc(D):  τ = √(T·[2D·ln(T·e/D) + ln c_δ])
        Les(J): τ = √(T·[2·ln Harding(T, J) + ln c_δ])
    """
    if T < 2:
        raise InvariantViolationError(f"Horizon must be >= 2, got {T}")
    if not 0 < delta < 1:
        raise InvariantViolationError(f"delta must lie in (0, 1), got {delta}")
    log_c = math.log(log_arg.constant(delta))
    if isinstance(complexity, Les):
        inner = 2 * math.log(harding(T, complexity.J)) + log_c
    elif isinstance(complexity, Vc):
        inner = 2 * complexity.D * math.log(T * math.e / complexity.D) + log_c
    else:
        raise InvariantViolationError(f"Unknown complexity {complexity!r}")

    tau = math.sqrt(T * inner)
    tau_ceil = math.ceil(tau)
    if tau_ceil >= T:
        raise HorizonTooShortError(
            f"Horizon T={T} is too short for {complexity}: the coarsening phase alone needs ceil(tau)={tau_ceil}"
        )

    if isinstance(complexity, Les):
        class_bound = harding(max(tau_ceil, 2), complexity.J)
    else:
        class_bound = sauer_bound(tau_ceil, complexity.D)
    if not minimum_horizon_ok(class_bound + 1, delta, T):
        logger.warning(f"T={T} is below max(8 ln N, 2 ln N + ln(2/delta)) for N <= {class_bound + 1}; "
                       f"the VC-EXP4.P guarantee may not apply")
    return PhasePlan(tau_raw=tau, tau_ceil=tau_ceil, run_length=T - tau_ceil, T=T, delta=delta,
                     log_arg=log_arg, complexity=complexity)


def run_coarsening_phase(stream, n_periods, n_arms, rng, builder, cap=None):
    """
    Assign the first `n_periods` subjects uniformly at random. Returns the
    covariates (the coarsening points) and the largest realised outcome.
    """
    uniform = np.full(n_arms, 1.0 / n_arms)
    points, largest = [], 0.0
    for period in range(1, n_periods + 1):
        try:
            x, outcomes = next(stream)
        except StopIteration:
            raise EnvironmentExhaustedError(period, period - 1) from None
        if cap is not None:
            outcomes = check_outcomes(outcomes, cap, period)
        arm_index = sample_arm(uniform, rng)
        builder.append(x, uniform, arm_index, outcomes)
        points.append(np.asarray(x, dtype=float))
        largest = max(largest, float(outcomes[arm_index]))
    return points, largest


@dataclass(frozen=True)
class VcRunResult:
    trajectory: object
    plan: PhasePlan
    catalog: CellCatalog
    params: TuningParams
    outcome_cap: float
    cap_mode: CapMode


def _check_catalog(catalog, points, J):
    if catalog.dim != J:
        raise DimensionMismatchError("Imported catalog", J, catalog.dim)
    hyperplanes, _ = deduplicate(points, J)
    if hyperplanes.shape != catalog.hyperplanes.shape or not np.allclose(hyperplanes, catalog.hyperplanes):
        raise InvariantViolationError("Imported catalog was built from different coarsening covariates")


def execute_vc_exp4p(env: Environment, J: int, T: int, delta: float, seed, overrides=None,
                     log_arg: LogArg = LogArg.TWO_OVER_DELTA, catalog: Optional[CellCatalog] = None,
                     cap_mode: CapMode = CapMode.ORACLE, inflation: Optional[float] = None,
                     on_period: Optional[Callable] = None, workers=None) -> VcRunResult:
    """Full VC–EXP4.P run; returns the trajectory with the plan, catalog and tuning it used."""
    if env.n_arms != 2:
        raise InvariantViolationError(f"VC-EXP4.P supports exactly two arms, got K={env.n_arms}")
    if env.dim != J:
        raise DimensionMismatchError("Environment covariates", J, env.dim)
    if env.n_periods < T:
        raise EnvironmentExhaustedError(env.n_periods + 1, env.n_periods)
    cap_mode = CapMode(cap_mode)

    plan = compute_tau(T, Les(J), delta, log_arg)
    rng = policy_rng(seed)
    stream = iter(env.periods())
    builder = TrajectoryBuilder(keep_counterfactuals=env.reveals_counterfactuals)
    oracle_cap = env.outcome_cap if cap_mode is CapMode.ORACLE else None
    points, largest = run_coarsening_phase(stream, plan.tau_ceil, env.n_arms, rng, builder, cap=oracle_cap)

    if cap_mode is CapMode.ORACLE:
        M = env.outcome_cap
    else:
        inflation = get_setting('PLUGIN_M_INFLATION') if inflation is None else inflation
        if not largest > 0:
            raise InvariantViolationError("Plug-in M needs a positive outcome during the coarsening phase")
        M = largest * inflation
    logger.info(f"Coarsening phase done after {plan.tau_ceil} periods; M={M:.6g} ({cap_mode.value})")

    if catalog is None:
        catalog = enumerate_cells(points, J, workers=workers)
    else:
        _check_catalog(catalog, points, J)
    if len(catalog) < 2:
        raise DegenerateCoarseningError(f"Coarsening produced {len(catalog)} cell(s); at least 2 are needed")
    roster = ExpertClass.finite(coarsen_les(points, J, catalog=catalog))

    params = compute_tuning(roster.size, env.n_arms, plan.run_length, M, delta)
    if overrides:
        params = params.scaled(**overrides)
    logger.info(f"VC-EXP4.P run phase: N={roster.size} horizon={plan.run_length} "
                f"beta={params.beta:.6g} gamma={params.gamma:.6g} eta={params.eta:.6g}")
    run_exploitation_phase(stream, roster, params, rng, builder, first_period=plan.tau_ceil + 1,
                           on_period=on_period)
    trajectory = builder.build(phase_boundary=plan.tau_ceil, seed=seed)
    return VcRunResult(trajectory=trajectory, plan=plan, catalog=catalog, params=params,
                       outcome_cap=M, cap_mode=cap_mode)


def run_vc_exp4p(env: Environment, J: int, T: int, delta: float, seed, overrides=None, **options):
    """
    Run VC–EXP4.P for T periods. `overrides` maps beta/gamma/eta to multipliers
    applied after the closed-form tuning. Keyword options are those of
    execute_vc_exp4p (log_arg, catalog, cap_mode, inflation, on_period, workers).
    """
    return execute_vc_exp4p(env, J, T, delta, seed, overrides=overrides, **options).trajectory
