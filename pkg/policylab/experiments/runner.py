"""
Batch runner behind the `run` and `summarize` commands.

Replications are independent: each one derives its covariate, noise and policy
streams from (base seed, replication index) and returns its WelfareReports.
They run on a process pool when `workers > 1`; results are collected in
replication order, so artifacts do not depend on scheduling. Artifacts are
written to a temporary sibling directory that is renamed into place at the end.
"""
import glob
import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from policies import __version__
from policies.arrangement import CellCatalog, enumerate_cells
from policies.conf import get_setting
from policies.core import UniformRandom, replication_seeds
from policies.exceptions import ConfigError, OutcomeBoundError, ReportMismatchError
from policies.exp4p import compute_tuning, regret_bound, run_f_exp4p
from policies.vcexp4p import CapMode, Les, compute_tau, execute_vc_exp4p, vc_regret_scale

from . import serializers
from .bench import (
    PolicyKind,
    fixed_policy,
    run_fixed_policy,
    run_tau_ewm,
    welfare_report,
)
from .config import Experiment, RunConfig, build_experts
from .envs import (
    LogNormalDesign,
    LogNormalEnvironment,
    TabularSchema,
    coarsening_points,
    difficulty,
    load_tabular,
)

logger = logging.getLogger(__name__)

QUANTILES = (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0)
SUMMARY_METRICS = ('empirical_welfare', 'policy_welfare', 'empirical_regret', 'regret')
FLOAT_FORMAT = '%.17g'


@dataclass(frozen=True)
class ReplicationTask:
    config: RunConfig
    variant: object
    replication: int
    cap: Optional[float] = None
    catalog: Optional[CellCatalog] = None


@dataclass(frozen=True)
class RunResult:
    output_dir: Path
    files: List[str]
    wall_time: float
    n_reports: int


# Environments

def _design(config, variant, cap):
    env = config.environment
    sigma = env.sigma if variant.sigma is None else variant.sigma
    return LogNormalDesign(sigma=sigma, n_periods=config.horizon, fixed_covariate_seed=env.fixed_covariate_seed,
                           normalization_cap=cap)


def build_environment(config: RunConfig, variant, replication: int, cap: Optional[float] = None):
    spec = config.environment
    if spec.kind == 'lognormal':
        return LogNormalEnvironment.for_replication(_design(config, variant, cap), config.base_seed, replication)
    schema = None
    if spec.covariate_columns or spec.outcome_columns:
        schema = TabularSchema(covariates=spec.covariate_columns or (), outcomes=spec.outcome_columns or ())
    M = spec.M if spec.M is not None else (spec.cap if isinstance(spec.cap, float) else None)
    return load_tabular(spec.path, schema=schema, shift=spec.shift, M=M)


def resolve_cap(config: RunConfig, variant) -> Optional[float]:
    """
    Outcome cap handed to every replication of a variant. In oracle mode it is
    the largest outcome over the first ORACLE_POOL replications, drawn before
    any policy runs, so it does not depend on how many replications the batch
    has. Replications past the pool must stay under it.
    """
    spec = config.environment
    if spec.kind != 'lognormal':
        return None
    if isinstance(spec.cap, float):
        return spec.cap
    if spec.cap != 'oracle':
        return None
    pool = get_setting('ORACLE_POOL')
    largest = max(build_environment(config, variant, r).max_outcome for r in range(pool))
    for replication in range(pool, config.replications):
        env = build_environment(config, variant, replication)
        if env.max_outcome > largest:
            period = int(np.argmax(env.outcomes.max(axis=1))) + 1
            logger.error(f"Replication {replication} of variant '{variant.name}' exceeds the oracle M "
                         f"drawn from {pool} replications; raise ORACLE_POOL")
            raise OutcomeBoundError(period, env.max_outcome, largest)
    logger.info(f"Oracle M for variant '{variant.name}': {largest:.6g} over {pool} pooled replications")
    return largest


def _covariates_shared(config):
    spec = config.environment
    return spec.kind == 'tabular' or spec.fixed_covariate_seed is not None


def shared_catalog(config: RunConfig, variant, cap, cache: dict) -> Optional[CellCatalog]:
    """
    One catalog for every replication when they all see the same covariates:
    imported from the config, or enumerated once from replication 0.
    """
    if config.experiment not in (Experiment.VC_EXP4P, Experiment.BENCHMARKS):
        return None
    if config.coarsening.catalog:
        if 'imported' not in cache:
            cache['imported'] = CellCatalog.read(config.coarsening.catalog)
        return cache['imported']
    if not _covariates_shared(config):
        return None
    env = build_environment(config, variant, 0, cap)
    plan = compute_tau(config.horizon, Les(env.dim), config.delta, config.coarsening.log_arg)
    points = coarsening_points(env, plan.tau_ceil)
    key = points.tobytes()
    if key not in cache:
        cache[key] = enumerate_cells(points, env.dim, workers=config.enumeration_workers)
    return cache[key]


# Replications

def _seed_metadata(seed):
    return {'entropy': seed.entropy, 'spawn_key': list(seed.spawn_key)}


def _population(env, roster):
    if not isinstance(env, LogNormalEnvironment):
        return None, None
    return env.population_welfare, roster


def _reference(config, env):
    if config.reference is None:
        return None
    return fixed_policy(PolicyKind(config.reference), dim=env.dim)


def _vc_run(task, env, seeds):
    config = task.config
    cap_mode = CapMode.PLUGIN if config.environment.cap == 'plugin' else CapMode.ORACLE
    return execute_vc_exp4p(
        env, env.dim, config.horizon, config.delta, seeds.policy,
        overrides=task.variant.tuning.as_overrides(),
        log_arg=config.coarsening.log_arg,
        catalog=task.catalog,
        cap_mode=cap_mode,
        inflation=config.coarsening.inflation,
        workers=1,
    )


def _f_exp4p_reports(task, env, seeds):
    config = task.config
    experts = build_experts(config.experts, env.dim, env.n_arms)
    M = env.outcome_cap
    params = compute_tuning(len(experts), env.n_arms, config.horizon, M, config.delta)
    params = params.scaled(**task.variant.tuning.as_overrides())
    trajectory = run_f_exp4p(env, experts, params, seeds.policy)
    oracle, population_roster = _population(env, experts)
    metadata = {
        'variant': task.variant.name,
        'M': M,
        'tuning': serializers.tuning_to_dict(params),
        'regret_bound': regret_bound(M, env.n_arms, config.horizon, len(experts), config.delta),
        'policy_seed': _seed_metadata(seeds.policy),
    }
    return [welfare_report(trajectory, 'f_exp4p', task.replication, roster=experts, oracle=oracle,
                           reference=_reference(config, env), metadata=metadata,
                           population_roster=population_roster)]


def _vc_report(task, env, seeds, result):
    oracle_rule = [fixed_policy(PolicyKind.ORACLE_LOGNORMAL)] if isinstance(env, LogNormalEnvironment) else None
    oracle, population_roster = _population(env, oracle_rule)
    roster = result.catalog.experts() + [UniformRandom()]
    metadata = {
        'variant': task.variant.name,
        'M': result.outcome_cap,
        'cap_mode': result.cap_mode.value,
        'phase_plan': serializers.phase_plan_to_dict(result.plan),
        'tuning': serializers.tuning_to_dict(result.params),
        'cells': len(result.catalog),
        'regret_scale': vc_regret_scale(result.outcome_cap, result.plan.tau_ceil, task.config.horizon,
                                        task.config.delta),
        'policy_seed': _seed_metadata(seeds.policy),
    }
    return welfare_report(result.trajectory, 'vc_exp4p', task.replication, roster=roster, oracle=oracle,
                          reference=_reference(task.config, env), metadata=metadata,
                          population_roster=population_roster)


def _benchmark_reports(task, env, seeds):
    config = task.config
    estimators = config.estimators if config.experiment is Experiment.BENCHMARKS else ('vc_exp4p',)
    reports = []
    catalog = task.catalog
    vc_result = None
    if 'vc_exp4p' in estimators:
        vc_result = _vc_run(task, env, seeds)
        catalog = vc_result.catalog
        reports.append(_vc_report(task, env, seeds, vc_result))
    if config.experiment is not Experiment.BENCHMARKS:
        return reports

    roster = None
    reference = _reference(config, env)
    lognormal = isinstance(env, LogNormalEnvironment)
    oracle, population_roster = _population(env, [fixed_policy(PolicyKind.ORACLE_LOGNORMAL)] if lognormal else None)
    if 'tau_ewm' in estimators:
        result = run_tau_ewm(env, env.dim, config.horizon, config.delta, seeds.policy,
                             log_arg=config.coarsening.log_arg, catalog=catalog,
                             use_counterfactuals=config.coarsening.counterfactual_ewm, workers=1)
        catalog = result.catalog
        roster = catalog.experts() + [UniformRandom()]
        reports.append(welfare_report(
            result.trajectory, 'tau_ewm', task.replication, roster=roster, oracle=oracle, reference=reference,
            population_roster=population_roster,
            metadata={'variant': task.variant.name, 'chosen_index': result.chosen_index,
                      'chosen': list(result.chosen.coefficients), 'tau_ceil': result.tau_ceil},
        ))
    if roster is None and catalog is not None:
        roster = catalog.experts() + [UniformRandom()]

    for name in ('oracle', 'treat_all', 'treat_none'):
        if name not in estimators:
            continue
        if name == 'oracle' and not lognormal:
            logger.warning("The oracle benchmark needs the lognormal environment; skipping it")
            continue
        kind = {'oracle': PolicyKind.ORACLE_LOGNORMAL, 'treat_all': PolicyKind.TREAT_ALL,
                'treat_none': PolicyKind.TREAT_NONE}[name]
        expert = fixed_policy(kind, dim=env.dim)
        trajectory = run_fixed_policy(env, expert, seeds.policy, n_periods=config.horizon)
        reports.append(welfare_report(trajectory, name, task.replication, roster=roster, oracle=oracle,
                                      reference=reference, population_roster=population_roster,
                                      metadata={'variant': task.variant.name}))
    return reports


def run_replication(task: ReplicationTask):
    config = task.config
    seeds = replication_seeds(config.base_seed, task.replication)
    env = build_environment(config, task.variant, task.replication, task.cap)
    if config.experiment is Experiment.F_EXP4P:
        reports = _f_exp4p_reports(task, env, seeds)
    else:
        reports = _benchmark_reports(task, env, seeds)
    logger.debug(f"Replication {task.replication} of variant '{task.variant.name}' done")
    return reports


def _map(function, tasks, workers):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(function, tasks))
    return [function(task) for task in tasks]


# Artifacts

class _Staging:
    """Temporary sibling of the output directory, renamed into place on commit."""

    def __init__(self, target: Path):
        self.target = Path(target)
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(prefix=f'.{self.target.name}-', dir=self.target.parent))
        self.files = []

    def write_text(self, relative, text):
        path = self.path / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding='utf-8')
        self.files.append(str(relative))
        return path

    def write_json(self, relative, data):
        return self.write_text(relative, json.dumps(data, indent=2, sort_keys=True) + '\n')

    def write_frame(self, relative, frame):
        return self.write_text(relative, frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator='\n'))

    def commit(self):
        backup = None
        if self.target.exists():
            backup = self.target.with_name(f'.{self.target.name}-previous')
            if backup.exists():
                shutil.rmtree(backup)
            os.replace(self.target, backup)
        os.replace(self.path, self.target)
        if backup is not None:
            shutil.rmtree(backup, ignore_errors=True)

    def discard(self):
        shutil.rmtree(self.path, ignore_errors=True)


def _manifest(config, wall_time, files, extra=None):
    manifest = {
        'experiment': config.experiment.value,
        'config': serializers.to_plain(config.echo),
        'version': __version__,
        'numpy_version': np.__version__,
        'wall_time': wall_time,
        'files': sorted(files),
    }
    manifest.update(extra or {})
    return manifest


def _run_difficulty(config, staging):
    rows = []
    for sigma in config.sigma_grid:
        estimate = difficulty(sigma, n_mc=config.draws, seed=config.base_seed)
        logger.info(f"Difficulty at sigma={sigma}: {estimate.probability:.4f} +/- {estimate.standard_error:.4f}")
        rows.append({'sigma': sigma, 'probability': estimate.probability,
                     'standard_error': estimate.standard_error, 'n_draws': estimate.n_draws})
    staging.write_frame('difficulty.csv', pd.DataFrame(rows))
    return {'rows': len(rows)}


def read_points(path, dim):
    """Coarsening points from a CSV with columns x1..xJ (or exactly J numeric columns)."""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ConfigError(f"cannot read points from {path}: {exc}", field='points') from exc
    columns = TabularSchema.from_header(frame.columns).covariates or list(frame.columns)
    if len(columns) != dim:
        raise ConfigError(f"{path} has {len(columns)} covariate columns, expected {dim}", field='dim')
    try:
        return frame[columns].to_numpy(dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path} has non-numeric coordinates: {exc}", field='points') from exc


def _run_enumerate(config, staging):
    points = read_points(config.points, config.dim)
    catalog = enumerate_cells(points, config.dim, workers=config.enumeration_workers)
    csv_path, sidecar_path = catalog.write(staging.path / 'catalog.csv')
    staging.files.extend([csv_path.name, sidecar_path.name])
    return {'cells': len(catalog), 'points': int(points.shape[0])}


def _run_policies(config, staging):
    rows, classification = [], []
    cache = {}
    caps = {}
    n_reports = 0
    for variant in config.variants:
        cap = resolve_cap(config, variant)
        caps[variant.name] = cap
        catalog = shared_catalog(config, variant, cap, cache)
        tasks = [ReplicationTask(config, variant, r, cap, catalog) for r in range(config.replications)]
        for reports in _map(run_replication, tasks, config.workers):
            for report in reports:
                staging.write_json(f'reports/{variant.name}/{report.estimator}-{report.replication:04d}.json',
                                   serializers.welfare_report_to_dict(report))
                rows.append(serializers.report_row(report, variant.name))
                classification.extend(serializers.classification_rows(report, variant.name))
                n_reports += 1
        logger.info(f"Variant '{variant.name}': {config.replications} replication(s) done")
    staging.write_frame('aggregate.csv', pd.DataFrame(rows))
    if classification:
        staging.write_frame('classification.csv', pd.DataFrame(classification))
    for index, catalog in enumerate(c for c in cache.values()):
        csv_path, sidecar_path = catalog.write(staging.path / f'catalog-{index}.csv')
        staging.files.extend([csv_path.name, sidecar_path.name])
    return {'reports': n_reports, 'outcome_caps': caps, 'oracle_pool': get_setting('ORACLE_POOL')}


def run_experiment(config: RunConfig) -> RunResult:
    """Execute a parsed config and write its artifacts to config.output."""
    started = time.perf_counter()
    logger.info(f"Running {config.experiment.value} into {config.output}")
    staging = _Staging(config.output)
    try:
        if config.experiment is Experiment.DIFFICULTY:
            extra = _run_difficulty(config, staging)
        elif config.experiment is Experiment.ENUMERATE:
            extra = _run_enumerate(config, staging)
        else:
            extra = _run_policies(config, staging)
        wall_time = time.perf_counter() - started
        files = list(staging.files) + ['manifest.json']
        staging.write_json('manifest.json', _manifest(config, wall_time, files, extra))
        staging.commit()
    except BaseException:
        staging.discard()
        raise
    logger.info(f"Finished {config.experiment.value} in {wall_time:.2f}s; artifacts in {config.output}")
    return RunResult(output_dir=config.output, files=sorted(files), wall_time=wall_time,
                     n_reports=extra.get('reports', 0))


# Summaries

def load_reports(pattern):
    paths = sorted(glob.glob(str(pattern), recursive=True))
    if not paths:
        raise ReportMismatchError(f"No reports match {pattern}")
    reports = []
    for path in paths:
        try:
            data = json.loads(Path(path).read_text(encoding='utf-8'))
        except (OSError, ValueError) as exc:
            raise ReportMismatchError(f"Cannot read report {path}: {exc}") from exc
        reports.append(serializers.welfare_report_from_dict(data))
    return reports


def summarize(pattern, metrics=SUMMARY_METRICS) -> pd.DataFrame:
    """
    Quantiles 0/10/25/50/75/90/100% and mean of each metric per (variant,
    estimator), with linear interpolation between order statistics.
    """
    reports = load_reports(pattern)
    shapes = {(r.n_arms, r.n_periods) for r in reports}
    if len(shapes) > 1:
        raise ReportMismatchError(f"Reports disagree on (K, T): {sorted(shapes)}")
    frame = pd.DataFrame([
        dict({'variant': r.metadata.get('variant', 'default'), 'estimator': r.estimator},
             **{m: getattr(r, m) for m in metrics})
        for r in reports
    ])
    rows = []
    for (variant, estimator), group in frame.groupby(['variant', 'estimator'], sort=False):
        for metric in metrics:
            values = pd.to_numeric(group[metric], errors='coerce').dropna()
            if values.empty:
                continue
            row = {'variant': variant, 'estimator': estimator, 'metric': metric, 'count': int(values.size)}
            for q in QUANTILES:
                row[f'q{int(round(q * 100))}'] = float(values.quantile(q, interpolation='linear'))
            row['mean'] = float(values.mean())
            rows.append(row)
    return pd.DataFrame(rows)
