import json
import os
import tempfile
from pathlib import Path
from unittest import skipUnless

import numpy as np
import pandas as pd
from django.conf import settings
from django.test import SimpleTestCase, override_settings

from experiments import serializers
from experiments.bench import WelfareReport
from experiments.config import Experiment, build_experts, load_config, parse_config
from experiments.runner import QUANTILES, build_environment, resolve_cap, run_experiment, summarize
from policies.core import LesRule, TableExpert, UniformRandom
from policies.exceptions import ConfigError, OutcomeBoundError, ReportMismatchError
from policies.vcexp4p import LogArg

CONFIGS = Path(settings.BASE_DIR) / 'configs'
SLOW = bool(os.getenv('POLICYLAB_SLOW_TESTS'))


class OutputRootMixin:
    """Points OUTPUT_ROOT at a temporary directory and keeps population Monte Carlo small."""

    def setUp(self):
        super().setUp()
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name)
        patcher = override_settings(POLICYLAB={
            **settings.POLICYLAB, 'OUTPUT_ROOT': self.root, 'POPULATION_MC_DRAWS': 10 ** 4,
        })
        patcher.enable()
        self.addCleanup(patcher.disable)


def write_separable_table(path, n_rows, seed=0):
    """One covariate; the treated arm pays more exactly when x1 >= 0.5."""
    rng = np.random.default_rng(seed)
    x = rng.random(n_rows)
    treated = x >= 0.5
    frame = pd.DataFrame({
        'x1': x,
        'y1': np.where(treated, 0.2, 0.8) + rng.uniform(0, 0.1, n_rows),
        'y2': np.where(treated, 0.8, 0.2) + rng.uniform(0, 0.1, n_rows),
    })
    frame.to_csv(path, index=False)
    return path


class ParseConfigTests(OutputRootMixin, SimpleTestCase):
    def test_errors_name_the_field_and_line(self):
        text = "experiment: vc_exp4p\nenvironment:\n  kind: lognormal\n  sigma: -1\nhorizon: 100\n"
        with self.assertRaises(ConfigError) as ctx:
            parse_config(text)
        self.assertEqual(ctx.exception.field, 'environment.sigma')
        self.assertEqual(ctx.exception.line, 4)

    def test_unknown_keys(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("experiment: difficulty\nsigma_grid: [0.1]\nbogus: 1\n")
        self.assertEqual((ctx.exception.field, ctx.exception.line), ('bogus', 3))
        with self.assertRaises(ConfigError) as ctx:
            parse_config("experiment: vc_exp4p\nhorizon: 100\nenvironment: {kind: lognormal, colour: red}\n")
        self.assertEqual(ctx.exception.field, 'environment.colour')

    def test_invalid_yaml_reports_a_line(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("experiment: difficulty\nsigma_grid: [0.1\n")
        self.assertIsNotNone(ctx.exception.line)

    def test_required_and_ranged_fields(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("experiment: vc_exp4p\nenvironment: {kind: lognormal}\n")
        self.assertEqual(ctx.exception.field, 'horizon')
        with self.assertRaises(ConfigError) as ctx:
            parse_config("experiment: vc_exp4p\nenvironment: {kind: lognormal}\nhorizon: 100\ndelta: 1.5\n")
        self.assertEqual(ctx.exception.field, 'delta')
        with self.assertRaises(ConfigError) as ctx:
            parse_config("experiment: nope\n")
        self.assertEqual(ctx.exception.field, 'experiment')

    def test_plugin_cap_is_not_available_to_f_exp4p(self):
        text = "experiment: f_exp4p\nenvironment: {kind: lognormal, cap: plugin}\nhorizon: 100\nexperts: [uniform]\n"
        with self.assertRaises(ConfigError) as ctx:
            parse_config(text)
        self.assertEqual(ctx.exception.field, 'environment.cap')

    def test_overrides_win(self):
        text = "experiment: vc_exp4p\nenvironment: {kind: lognormal}\nhorizon: 100\nseeds: {base: 3}\n"
        config = parse_config(text, overrides={'seed': 7, 'replications': 4, 'horizon': None, 'delta': 0.1})
        self.assertEqual(config.base_seed, 7)
        self.assertEqual(config.replications, 4)
        self.assertEqual(config.horizon, 100)
        self.assertEqual(config.delta, 0.1)

    def test_output_resolution(self):
        base = "experiment: difficulty\nsigma_grid: [0.1]\n"
        self.assertEqual(parse_config(base, default_name='curve').output, self.root / 'curve')
        self.assertEqual(parse_config(base + "output: named\n").output, self.root / 'named')
        absolute = self.root / 'elsewhere'
        self.assertEqual(parse_config(base + f"output: {absolute}\n").output, absolute)

    def test_default_reference(self):
        lognormal = parse_config("experiment: vc_exp4p\nenvironment: {kind: lognormal}\nhorizon: 100\n")
        self.assertEqual(lognormal.reference, 'oracle_lognormal')
        tabular = parse_config("experiment: vc_exp4p\nenvironment: {kind: tabular, path: t.csv}\nhorizon: 100\n",
                               base_dir='/data')
        self.assertIsNone(tabular.reference)
        self.assertEqual(tabular.environment.path, str(Path('/data') / 't.csv'))

    def test_variants_inherit_the_top_level_tuning(self):
        text = ("experiment: vc_exp4p\nenvironment: {kind: lognormal}\nhorizon: 100\n"
                "tuning: {gamma: 0.5}\nvariants:\n  - {name: a, tuning: {eta: 2.0}}\n  - {name: b, sigma: 0.3}\n")
        config = parse_config(text)
        self.assertEqual(config.variants[0].tuning.as_overrides(), {'beta': 1.0, 'gamma': 0.5, 'eta': 2.0})
        self.assertEqual(config.variants[1].sigma, 0.3)
        with self.assertRaises(ConfigError):
            parse_config(text.replace('name: b', 'name: a'))

    def test_shipped_configs_parse(self):
        paths = sorted(CONFIGS.glob('*.yaml'))
        self.assertGreaterEqual(len(paths), 10)
        for path in paths:
            config = load_config(path)
            self.assertEqual(config.output.parent, self.root, path.name)
        sweep = load_config(CONFIGS / 'sigma_sweep.yaml')
        self.assertEqual([v.sigma for v in sweep.variants], [0.0, 0.1, 0.3, 0.5])
        self.assertIs(sweep.coarsening.log_arg, LogArg.TWO_OVER_DELTA)
        self.assertEqual(load_config(CONFIGS / 'four_points.yaml').experiment, Experiment.ENUMERATE)


class BuildExpertsTests(SimpleTestCase):
    def test_kinds(self):
        specs = parse_config(
            "experiment: f_exp4p\nenvironment: {kind: lognormal}\nhorizon: 100\nexperts:\n"
            "  - {kind: les, coefficients: [0.0, 1.0, -1.0]}\n  - {kind: constant, arm: 2}\n"
            "  - {kind: random_les, count: 3, seed: 5}\n  - uniform\n  - treat_none\n"
        ).experts
        experts = build_experts(specs, dim=2)
        self.assertEqual(len(experts), 7)
        self.assertEqual(experts[0], LesRule((0.0, 1.0, -1.0)))
        self.assertEqual(experts[1], TableExpert(default=2))
        self.assertTrue(all(isinstance(e, LesRule) and e.dim == 2 for e in experts[2:5]))
        self.assertIsInstance(experts[5], UniformRandom)
        self.assertEqual(experts[6], LesRule((-1.0, 0.0, 0.0)))
        self.assertEqual(build_experts(specs, dim=2)[2:5], experts[2:5])

    def test_coefficients_must_match_the_dimension(self):
        with self.assertRaises(ConfigError):
            build_experts([{'kind': 'les', 'coefficients': [0.0, 1.0]}], dim=2)


class RunExperimentTests(OutputRootMixin, SimpleTestCase):
    def test_difficulty(self):
        config = parse_config("experiment: difficulty\nsigma_grid: [0.0, 0.1]\ndraws: 100000\n", default_name='d')
        result = run_experiment(config)
        frame = pd.read_csv(result.output_dir / 'difficulty.csv')
        self.assertEqual(list(frame['sigma']), [0.0, 0.1])
        self.assertEqual(frame['probability'].iloc[0], 0.0)
        manifest = json.loads((result.output_dir / 'manifest.json').read_text(encoding='utf-8'))
        self.assertEqual(manifest['experiment'], 'difficulty')
        self.assertEqual(manifest['files'], ['difficulty.csv', 'manifest.json'])

    def test_enumerate_four_points(self):
        result = run_experiment(load_config(CONFIGS / 'four_points.yaml'))
        catalog = pd.read_csv(result.output_dir / 'catalog.csv', dtype={'label': str}, keep_default_na=False)
        self.assertEqual(len(catalog), 14)
        self.assertEqual(list(catalog.columns), ['label', 'beta_0', 'beta_1', 'beta_2'])

    def test_rerun_replaces_the_output_directory(self):
        config = parse_config("experiment: difficulty\nsigma_grid: [0.0]\ndraws: 100000\noutput: again\n")
        run_experiment(config)
        (self.root / 'again' / 'stale.txt').write_text('old', encoding='utf-8')
        run_experiment(config)
        self.assertFalse((self.root / 'again' / 'stale.txt').exists())
        self.assertEqual([p.name for p in self.root.iterdir()], ['again'])

    def test_f_exp4p_replications_do_not_depend_on_the_batch(self):
        text = ("experiment: f_exp4p\nenvironment: {kind: lognormal, sigma: 0.1, cap: replication}\n"
                "horizon: 60\nseeds: {base: 8, replications: REPS}\noutput: OUT\n"
                "experts:\n  - {kind: random_les, count: 3, seed: 1}\n  - uniform\n")
        one = run_experiment(parse_config(text.replace('REPS', '1').replace('OUT', 'one')))
        two = run_experiment(parse_config(text.replace('REPS', '2').replace('OUT', 'two')))
        self.assertEqual((one.n_reports, two.n_reports), (1, 2))
        first = (one.output_dir / 'reports' / 'default' / 'f_exp4p-0000.json').read_text(encoding='utf-8')
        again = (two.output_dir / 'reports' / 'default' / 'f_exp4p-0000.json').read_text(encoding='utf-8')
        self.assertEqual(first, again)
        report = json.loads(first)
        self.assertEqual(report['n_periods'], 60)
        self.assertIsNotNone(report['regret'])
        self.assertEqual(len(report['correct_classification']), 60)

    def test_oracle_cap_does_not_depend_on_the_batch(self):
        text = ("experiment: f_exp4p\nenvironment: {kind: lognormal, sigma: 0.5}\n"
                "horizon: 60\nseeds: {base: 5, replications: REPS}\noutput: OUT\n"
                "experts:\n  - {kind: random_les, count: 3, seed: 1}\n  - uniform\n")
        one = run_experiment(parse_config(text.replace('REPS', '1').replace('OUT', 'one')))
        two = run_experiment(parse_config(text.replace('REPS', '2').replace('OUT', 'two')))
        first = (one.output_dir / 'reports' / 'default' / 'f_exp4p-0000.json').read_text(encoding='utf-8')
        again = (two.output_dir / 'reports' / 'default' / 'f_exp4p-0000.json').read_text(encoding='utf-8')
        self.assertEqual(first, again)
        caps = [json.loads((r.output_dir / 'manifest.json').read_text(encoding='utf-8'))['outcome_caps']
                for r in (one, two)]
        self.assertEqual(caps[0], caps[1])

    def test_replications_past_the_oracle_pool_must_fit_under_its_cap(self):
        config = parse_config("experiment: f_exp4p\nenvironment: {kind: lognormal, sigma: 0.5}\n"
                              "horizon: 60\nseeds: {base: 5, replications: 40}\nexperts: [uniform]\n")
        variant = config.variants[0]
        maxima = [build_environment(config, variant, r).max_outcome for r in range(40)]
        with self.settings(POLICYLAB={**settings.POLICYLAB, 'ORACLE_POOL': 40}):
            self.assertEqual(resolve_cap(config, variant), max(maxima))
        with self.settings(POLICYLAB={**settings.POLICYLAB, 'ORACLE_POOL': 60}):
            self.assertEqual(resolve_cap(config, variant), max(
                build_environment(config, variant, r).max_outcome for r in range(60)))
        records = [r for r in range(1, 40) if maxima[r] > max(maxima[:r])]
        if not records:
            with self.settings(POLICYLAB={**settings.POLICYLAB, 'ORACLE_POOL': 1}):
                self.assertEqual(resolve_cap(config, variant), maxima[0])
            return
        pool = records[0]
        with self.settings(POLICYLAB={**settings.POLICYLAB, 'ORACLE_POOL': pool}):
            with self.assertRaises(OutcomeBoundError) as ctx:
                resolve_cap(config, variant)
        self.assertEqual(ctx.exception.cap, max(maxima[:pool]))
        self.assertEqual(ctx.exception.value, maxima[pool])

    def test_identical_configs_write_identical_aggregates(self):
        config = load_config(CONFIGS / 'tabular_example.yaml')
        first = (run_experiment(config).output_dir / 'aggregate.csv').read_bytes()
        second = (run_experiment(config).output_dir / 'aggregate.csv').read_bytes()
        self.assertEqual(first, second)

    def test_shipped_tabular_example(self):
        result = run_experiment(load_config(CONFIGS / 'tabular_example.yaml'))
        self.assertEqual(result.n_reports, 5)
        aggregate = pd.read_csv(result.output_dir / 'aggregate.csv')
        self.assertEqual(list(aggregate['replication']), [0, 1, 2, 3, 4])
        self.assertTrue(aggregate['regret'].isna().all())
        self.assertFalse(aggregate['empirical_regret'].isna().any())
        self.assertFalse((result.output_dir / 'classification.csv').exists())

    def test_benchmarks_on_a_table(self):
        table = write_separable_table(self.root / 'table.csv', 200, seed=4)
        text = (f"experiment: benchmarks\nenvironment: {{kind: tabular, path: {table}, M: 1.0}}\n"
                "horizon: 200\nseeds: {base: 3}\noutput: bench\n")
        result = run_experiment(parse_config(text))
        reports = result.output_dir / 'reports' / 'default'
        self.assertEqual(sorted(p.name for p in reports.iterdir()),
                         ['tau_ewm-0000.json', 'treat_all-0000.json', 'treat_none-0000.json', 'vc_exp4p-0000.json'])
        self.assertTrue((result.output_dir / 'catalog-0.csv').exists())
        vc = json.loads((reports / 'vc_exp4p-0000.json').read_text(encoding='utf-8'))
        tau_ewm = json.loads((reports / 'tau_ewm-0000.json').read_text(encoding='utf-8'))
        self.assertEqual(vc['phase_boundary'], tau_ewm['phase_boundary'])
        self.assertEqual(vc['metadata']['cells'], 2 * vc['phase_boundary'])
        self.assertEqual(vc['metadata']['phase_plan']['tau_ceil'], 56)


class SummarizeTests(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.dir = Path(tmp.name)

    def write_reports(self, welfares, n_periods=10, estimator='f_exp4p', variant='default'):
        for index, welfare in enumerate(welfares):
            report = WelfareReport(estimator=estimator, replication=index, n_periods=n_periods, n_arms=2,
                                   empirical_welfare=float(welfare), metadata={'variant': variant})
            path = self.dir / variant / f'{estimator}-{n_periods}-{index:04d}.json'
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(serializers.welfare_report_to_dict(report)), encoding='utf-8')

    def test_quantiles_and_mean(self):
        self.write_reports([1, 2, 3, 4])
        table = summarize(self.dir / '**' / '*.json')
        self.assertEqual(len(table), 1)
        row = table.iloc[0]
        self.assertEqual(row['metric'], 'empirical_welfare')
        self.assertEqual(row['count'], 4)
        self.assertAlmostEqual(row['q50'], 2.5)
        self.assertAlmostEqual(row['mean'], 2.5)
        self.assertAlmostEqual(row['q0'], 1.0)
        self.assertAlmostEqual(row['q100'], 4.0)

    def test_single_report(self):
        self.write_reports([7.5])
        row = summarize(self.dir / '**' / '*.json').iloc[0]
        self.assertEqual({row[f'q{int(round(q * 100))}'] for q in QUANTILES}, {7.5})

    def test_linear_interpolation(self):
        values = np.random.default_rng(0).gamma(2.0, size=37)
        self.write_reports(values)
        row = summarize(self.dir / '**' / '*.json').iloc[0]
        for q in QUANTILES:
            self.assertAlmostEqual(row[f'q{int(round(q * 100))}'], float(np.quantile(values, q)), places=10)

    def test_groups_by_variant_and_estimator(self):
        self.write_reports([1, 2], variant='a')
        self.write_reports([5, 6, 7], variant='b', estimator='tau_ewm')
        table = summarize(self.dir / '**' / '*.json')
        self.assertEqual(sorted(zip(table['variant'], table['estimator'], table['count'])),
                         [('a', 'f_exp4p', 2), ('b', 'tau_ewm', 3)])

    def test_mismatched_reports(self):
        self.write_reports([1, 2], n_periods=10)
        self.write_reports([3], n_periods=20)
        with self.assertRaises(ReportMismatchError):
            summarize(self.dir / '**' / '*.json')

    def test_no_reports(self):
        with self.assertRaises(ReportMismatchError):
            summarize(self.dir / '**' / '*.json')


@skipUnless(SLOW, "full-size sweeps; set POLICYLAB_SLOW_TESTS=1")
class SweepTrendTests(OutputRootMixin, SimpleTestCase):
    """Terminal correct-classification probability across the shipped sigma and eta sweeps."""

    def terminal(self, name):
        result = run_experiment(load_config(CONFIGS / name))
        frame = pd.read_csv(result.output_dir / 'classification.csv')
        last = frame[(frame['estimator'] == 'vc_exp4p') & (frame['period'] == frame['period'].max())]
        return {variant: group['probability'].to_numpy() for variant, group in last.groupby('variant')}

    def test_noise_lowers_the_median(self):
        finals = self.terminal('sigma_sweep.yaml')
        medians = [np.median(finals[f'sigma-{sigma}']) for sigma in ('0.0', '0.1', '0.3', '0.5')]
        for lower_noise, higher_noise in zip(medians, medians[1:]):
            self.assertGreater(lower_noise, higher_noise)

    def test_larger_steps_raise_the_median_and_the_spread(self):
        finals = self.terminal('eta_sweep.yaml')
        medians = [np.median(finals[f'eta-{eta}']) for eta in ('0.25', '1.0', '1.5')]
        self.assertEqual(medians, sorted(medians))

        def iqr(values):
            upper, lower = np.percentile(values, [75, 25])
            return upper - lower

        self.assertLess(iqr(finals['eta-0.25']), iqr(finals['eta-1.5']))
