"""
YAML experiment configurations.

A config names one experiment and everything it needs:

    experiment: vc_exp4p
    environment: {kind: lognormal, sigma: 0.1, fixed_covariates: 7, cap: oracle}
    horizon: 1000
    delta: 0.05
    seeds: {base: 2024, replications: 100}
    tuning: {beta: 1.0, gamma: 1.0, eta: 1.0}
    coarsening: {log_arg: two_over_delta}
    variants:
      - {name: eta-0.25, tuning: {eta: 0.25}}
    output: sigma-sweep

Errors carry the dotted field name and, where the YAML has one, its line.
"""
import copy
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import yaml

from policies.conf import get_setting
from policies.core import LesRule, UniformRandom, constant_expert
from policies.exceptions import ConfigError
from policies.vcexp4p import LogArg

from .bench import PolicyKind, fixed_policy

logger = logging.getLogger(__name__)


class Experiment(enum.Enum):
    F_EXP4P = 'f_exp4p'
    VC_EXP4P = 'vc_exp4p'
    BENCHMARKS = 'benchmarks'
    ENUMERATE = 'enumerate'
    DIFFICULTY = 'difficulty'

    @property
    def needs_environment(self):
        return self in (Experiment.F_EXP4P, Experiment.VC_EXP4P, Experiment.BENCHMARKS)


BENCHMARK_ESTIMATORS = ('vc_exp4p', 'tau_ewm', 'oracle', 'treat_all', 'treat_none')
CAP_MODES = ('oracle', 'replication', 'plugin')
TOP_LEVEL_KEYS = {
    'experiment', 'environment', 'horizon', 'delta', 'seeds', 'tuning', 'experts', 'coarsening',
    'variants', 'output', 'workers', 'enumeration_workers', 'points', 'dim', 'sigma_grid', 'draws',
    'estimators', 'reference',
}


@dataclass(frozen=True)
class Multipliers:
    beta: float = 1.0
    gamma: float = 1.0
    eta: float = 1.0

    def as_overrides(self):
        return {'beta': self.beta, 'gamma': self.gamma, 'eta': self.eta}

    def merged(self, other: dict):
        values = self.as_overrides()
        values.update(other)
        return Multipliers(**values)


@dataclass(frozen=True)
class EnvironmentSpec:
    kind: str
    sigma: float = 0.0
    fixed_covariate_seed: Optional[int] = None
    cap: Union[str, float] = 'oracle'
    path: Optional[str] = None
    shift: float = 0.0
    M: Optional[float] = None
    covariate_columns: Optional[Tuple[str, ...]] = None
    outcome_columns: Optional[Tuple[str, ...]] = None


@dataclass(frozen=True)
class Variant:
    name: str
    sigma: Optional[float] = None
    tuning: Multipliers = Multipliers()


@dataclass(frozen=True)
class CoarseningSpec:
    log_arg: LogArg = LogArg.TWO_OVER_DELTA
    catalog: Optional[str] = None
    inflation: Optional[float] = None
    counterfactual_ewm: bool = False


@dataclass(frozen=True)
class RunConfig:
    experiment: Experiment
    output: Path
    environment: Optional[EnvironmentSpec] = None
    horizon: Optional[int] = None
    delta: float = 0.05
    base_seed: int = 0
    replications: int = 1
    tuning: Multipliers = Multipliers()
    experts: Tuple[dict, ...] = ()
    coarsening: CoarseningSpec = CoarseningSpec()
    variants: Tuple[Variant, ...] = (Variant('default'),)
    workers: int = 1
    enumeration_workers: int = 1
    points: Optional[str] = None
    dim: Optional[int] = None
    sigma_grid: Tuple[float, ...] = ()
    draws: int = 10 ** 6
    estimators: Tuple[str, ...] = BENCHMARK_ESTIMATORS
    reference: Optional[str] = None
    source: Optional[str] = None
    echo: dict = field(default_factory=dict, compare=False)


class _Locator:
    """Maps dotted field paths to 1-based YAML line numbers."""

    def __init__(self, text):
        self.lines = {}
        try:
            root = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError:
            root = None
        if root is not None:
            self._walk(root, '')

    def _walk(self, node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                path = f"{prefix}.{key.value}" if prefix else str(key.value)
                self.lines[path] = key.start_mark.line + 1
                self._walk(value, path)
        elif isinstance(node, yaml.SequenceNode):
            for index, item in enumerate(node.value):
                path = f"{prefix}[{index}]"
                self.lines[path] = item.start_mark.line + 1
                self._walk(item, path)

    def line(self, path):
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path.rpartition('.')[0]
        return None


class _Parser:
    def __init__(self, data, locator, base_dir):
        self.data = data
        self.locator = locator
        self.base_dir = base_dir

    def error(self, path, message):
        return ConfigError(message, field=path, line=self.locator.line(path))

    def section(self, path, value, allowed):
        if value is None:
            return {}
        if not isinstance(value, dict):
            raise self.error(path, "must be a mapping")
        unknown = sorted(str(k) for k in set(value) - set(allowed))
        if unknown:
            raise self.error(f"{path}.{unknown[0]}", f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return value

    def number(self, path, value, minimum=None, maximum=None, strict_min=False, integer=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(path, f"must be a number, got {value!r}")
        if integer and (not isinstance(value, int) and not float(value).is_integer()):
            raise self.error(path, f"must be an integer, got {value!r}")
        value = int(value) if integer else float(value)
        if not np.isfinite(value):
            raise self.error(path, "must be finite")
        if minimum is not None and (value <= minimum if strict_min else value < minimum):
            raise self.error(path, f"must be {'>' if strict_min else '>='} {minimum}, got {value}")
        if maximum is not None and value > maximum:
            raise self.error(path, f"must be <= {maximum}, got {value}")
        return value

    def path(self, path, value):
        if not isinstance(value, str) or not value:
            raise self.error(path, "must be a file path")
        resolved = Path(value)
        return str(resolved if resolved.is_absolute() else (self.base_dir / resolved))

    def multipliers(self, path, value, base=Multipliers()):
        value = self.section(path, value, {'beta', 'gamma', 'eta'})
        parsed = {k: self.number(f"{path}.{k}", v, minimum=0, strict_min=True) for k, v in value.items()}
        return base.merged(parsed)

    def environment(self, value):
        value = self.section('environment', value, {
            'kind', 'sigma', 'fixed_covariates', 'cap', 'path', 'shift', 'M', 'covariates', 'outcomes',
        })
        kind = value.get('kind')
        if kind not in ('lognormal', 'tabular'):
            raise self.error('environment.kind', f"must be 'lognormal' or 'tabular', got {kind!r}")
        cap = value.get('cap', 'oracle')
        if isinstance(cap, str):
            if cap not in CAP_MODES:
                raise self.error('environment.cap', f"must be a number or one of {', '.join(CAP_MODES)}")
        else:
            cap = self.number('environment.cap', cap, minimum=0, strict_min=True)
        fixed = value.get('fixed_covariates')
        if fixed is not None:
            fixed = self.number('environment.fixed_covariates', fixed, minimum=0, integer=True)
        spec = dict(kind=kind, cap=cap, fixed_covariate_seed=fixed)
        if kind == 'lognormal':
            spec['sigma'] = self.number('environment.sigma', value.get('sigma', 0.0), minimum=0)
        else:
            if 'path' not in value:
                raise self.error('environment.path', "is required for a tabular environment")
            spec['path'] = self.path('environment.path', value['path'])
            spec['shift'] = self.number('environment.shift', value.get('shift', 0.0))
            if 'M' in value:
                spec['M'] = self.number('environment.M', value['M'], minimum=0, strict_min=True)
            for key, target in (('covariates', 'covariate_columns'), ('outcomes', 'outcome_columns')):
                if key in value:
                    columns = value[key]
                    if not isinstance(columns, list) or not all(isinstance(c, str) for c in columns):
                        raise self.error(f'environment.{key}', "must be a list of column names")
                    spec[target] = tuple(columns)
        return EnvironmentSpec(**spec)

    def experts(self, value):
        if not isinstance(value, list) or not value:
            raise self.error('experts', "must be a nonempty list of expert specs")
        specs = []
        for index, item in enumerate(value):
            path = f'experts[{index}]'
            if isinstance(item, str):
                item = {'kind': item}
            item = self.section(path, item, {'kind', 'coefficients', 'arm', 'count', 'seed'})
            kind = item.get('kind')
            if kind == 'les':
                coefficients = item.get('coefficients')
                if not isinstance(coefficients, list) or len(coefficients) < 2:
                    raise self.error(f'{path}.coefficients', "must list beta_0..beta_J")
                item = {'kind': kind, 'coefficients': [
                    self.number(f'{path}.coefficients[{i}]', c) for i, c in enumerate(coefficients)
                ]}
            elif kind == 'constant':
                item = {'kind': kind, 'arm': self.number(f'{path}.arm', item.get('arm'), minimum=1, integer=True)}
            elif kind == 'random_les':
                item = {
                    'kind': kind,
                    'count': self.number(f'{path}.count', item.get('count'), minimum=1, integer=True),
                    'seed': self.number(f'{path}.seed', item.get('seed', 0), minimum=0, integer=True),
                }
            elif kind not in ('uniform', 'treat_all', 'treat_none', 'oracle_lognormal'):
                raise self.error(f'{path}.kind', f"unknown expert kind {kind!r}")
            specs.append(item)
        return tuple(specs)

    def coarsening(self, value):
        value = self.section('coarsening', value, {'log_arg', 'catalog', 'inflation', 'counterfactual_ewm'})
        try:
            log_arg = LogArg(value.get('log_arg', LogArg.TWO_OVER_DELTA.value))
        except ValueError:
            raise self.error('coarsening.log_arg', "must be two_over_delta or three_over_delta") from None
        inflation = value.get('inflation')
        if inflation is not None:
            inflation = self.number('coarsening.inflation', inflation, minimum=1)
        catalog = self.path('coarsening.catalog', value['catalog']) if 'catalog' in value else None
        counterfactual = value.get('counterfactual_ewm', False)
        if not isinstance(counterfactual, bool):
            raise self.error('coarsening.counterfactual_ewm', "must be true or false")
        return CoarseningSpec(log_arg=log_arg, catalog=catalog, inflation=inflation,
                              counterfactual_ewm=counterfactual)

    def variants(self, value, tuning):
        if value is None:
            return (Variant('default', tuning=tuning),)
        if not isinstance(value, list) or not value:
            raise self.error('variants', "must be a nonempty list")
        variants, names = [], set()
        for index, item in enumerate(value):
            path = f'variants[{index}]'
            item = self.section(path, item, {'name', 'sigma', 'tuning'})
            name = item.get('name')
            if not isinstance(name, str) or not name or name in names:
                raise self.error(f'{path}.name', "must be a unique nonempty string")
            names.add(name)
            sigma = item.get('sigma')
            if sigma is not None:
                sigma = self.number(f'{path}.sigma', sigma, minimum=0)
            variants.append(Variant(name=name, sigma=sigma,
                                    tuning=self.multipliers(f'{path}.tuning', item.get('tuning'), tuning)))
        return tuple(variants)

    def parse(self, default_name):
        data = self.data
        unknown = sorted(str(k) for k in set(data) - TOP_LEVEL_KEYS)
        if unknown:
            raise self.error(unknown[0], "unknown top-level key")
        try:
            experiment = Experiment(data.get('experiment'))
        except ValueError:
            choices = ', '.join(e.value for e in Experiment)
            raise self.error('experiment', f"must be one of {choices}, got {data.get('experiment')!r}") from None

        seeds = self.section('seeds', data.get('seeds'), {'base', 'replications'})
        tuning = self.multipliers('tuning', data.get('tuning'))
        options = dict(
            experiment=experiment,
            delta=self.number('delta', data.get('delta', 0.05), minimum=0, strict_min=True, maximum=1),
            base_seed=self.number('seeds.base', seeds.get('base', 0), minimum=0, integer=True),
            replications=self.number('seeds.replications', seeds.get('replications', 1), minimum=1, integer=True),
            tuning=tuning,
            variants=self.variants(data.get('variants'), tuning),
            coarsening=self.coarsening(data.get('coarsening')),
            workers=self.number('workers', data.get('workers', get_setting('WORKERS')), minimum=1, integer=True),
            enumeration_workers=self.number('enumeration_workers',
                                            data.get('enumeration_workers', get_setting('ENUMERATION_WORKERS')),
                                            minimum=1, integer=True),
            source=str(self.base_dir),
        )
        if options['delta'] >= 1:
            raise self.error('delta', "must lie in (0, 1)")

        output = data.get('output', default_name)
        if not isinstance(output, str) or not output:
            raise self.error('output', "must be a directory name or path")
        output = Path(output)
        options['output'] = output if output.is_absolute() else Path(get_setting('OUTPUT_ROOT')) / output

        if experiment.needs_environment:
            if 'environment' not in data:
                raise self.error('environment', f"is required for {experiment.value}")
            options['environment'] = self.environment(data['environment'])
            if 'horizon' not in data:
                raise self.error('horizon', f"is required for {experiment.value}")
            options['horizon'] = self.number('horizon', data['horizon'], minimum=2, integer=True)
            if options['environment'].kind == 'tabular' and any(v.sigma is not None for v in options['variants']):
                raise self.error('variants', "sigma variants only apply to the lognormal environment")
        if experiment is Experiment.F_EXP4P:
            options['experts'] = self.experts(data.get('experts'))
            if options['environment'].cap == 'plugin':
                raise self.error('environment.cap', "plug-in M is only defined for vc_exp4p and benchmarks")
        if experiment is Experiment.BENCHMARKS and 'estimators' in data:
            estimators = data['estimators']
            if not isinstance(estimators, list) or not estimators or not set(estimators) <= set(BENCHMARK_ESTIMATORS):
                raise self.error('estimators', f"must be a nonempty subset of {', '.join(BENCHMARK_ESTIMATORS)}")
            options['estimators'] = tuple(e for e in BENCHMARK_ESTIMATORS if e in estimators)
        if 'reference' in data:
            reference = data['reference']
            if reference is not None and reference not in ('oracle_lognormal', 'treat_all', 'treat_none'):
                raise self.error('reference', "must be oracle_lognormal, treat_all, treat_none or null")
            options['reference'] = reference
        elif options.get('environment') is not None and options['environment'].kind == 'lognormal':
            options['reference'] = 'oracle_lognormal'

        if experiment is Experiment.ENUMERATE:
            if 'points' not in data:
                raise self.error('points', "is required for enumerate")
            options['points'] = self.path('points', data['points'])
            options['dim'] = self.number('dim', data.get('dim'), minimum=1, integer=True)
        if experiment is Experiment.DIFFICULTY:
            grid = data.get('sigma_grid')
            if not isinstance(grid, list) or not grid:
                raise self.error('sigma_grid', "must be a nonempty list of noise scales")
            options['sigma_grid'] = tuple(self.number(f'sigma_grid[{i}]', s, minimum=0) for i, s in enumerate(grid))
            options['draws'] = self.number('draws', data.get('draws', 10 ** 6), minimum=10 ** 5, integer=True)
        return RunConfig(echo=copy.deepcopy(data), **options)


OVERRIDE_FIELDS = {
    'seed': ('seeds', 'base'),
    'replications': ('seeds', 'replications'),
    'horizon': ('horizon',),
    'delta': ('delta',),
    'output': ('output',),
    'workers': ('workers',),
}


def apply_overrides(data, overrides):
    """Command-line flags win over the file; None means not given."""
    data = copy.deepcopy(data)
    for name, value in (overrides or {}).items():
        if value is None:
            continue
        keys = OVERRIDE_FIELDS[name]
        target = data
        for key in keys[:-1]:
            section = target.get(key)
            if not isinstance(section, dict):
                section = {}
                target[key] = section
            target = section
        target[keys[-1]] = value
    return data


def parse_config(text, base_dir='.', default_name='run', overrides=None) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, 'problem_mark', None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark is not None else None) from exc
    if not isinstance(data, dict):
        raise ConfigError("the config must be a YAML mapping")
    data = apply_overrides(data, overrides)
    return _Parser(data, _Locator(text), Path(base_dir)).parse(default_name)


def load_config(path, overrides=None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    config = parse_config(text, base_dir=path.parent, default_name=path.stem, overrides=overrides)
    logger.info(f"Loaded {config.experiment.value} config from {path}")
    return config


def build_experts(specs, dim, n_arms=2):
    """Expert objects for validated expert specs; random_les expands to `count` rules."""
    experts = []
    for spec in specs:
        kind = spec['kind']
        if kind == 'les':
            if len(spec['coefficients']) != dim + 1:
                raise ConfigError(f"LES coefficients need {dim + 1} entries, got {len(spec['coefficients'])}",
                                  field='experts')
            experts.append(LesRule(tuple(spec['coefficients'])))
        elif kind == 'uniform':
            experts.append(UniformRandom())
        elif kind == 'constant':
            experts.append(constant_expert(spec['arm'], n_arms))
        elif kind == 'random_les':
            draws = np.random.default_rng(spec['seed']).normal(size=(spec['count'], dim + 1))
            experts.extend(LesRule(tuple(row)) for row in draws)
        else:
            experts.append(fixed_policy(PolicyKind(kind), dim=dim))
    return experts
