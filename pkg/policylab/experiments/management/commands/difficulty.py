"""
Monte Carlo difficulty of the log-normal design over a grid of noise scales.
Usage: python manage.py difficulty --sigma-grid 0 0.1 0.2 0.3 0.4 0.5 [--draws 1000000]
"""
import yaml

from experiments.config import parse_config
from policies.exceptions import ConfigError

from ._common import ExperimentCommand, config_error


class Command(ExperimentCommand):
    help = 'Estimate the misclassification probability of the oracle rule for each sigma'

    def add_arguments(self, parser):
        parser.add_argument(
            '--sigma-grid',
            type=float,
            nargs='+',
            default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            help='Noise scales to evaluate (default: 0 0.1 ... 0.5)',
        )
        parser.add_argument('--draws', type=int, default=10**6, help='Monte Carlo draws per sigma')
        parser.add_argument('--seed', type=int, default=0, help='Base seed')
        parser.add_argument('--output', type=str, default='difficulty', help='Output directory')
        self.add_ledger_argument(parser)

    def handle(self, *args, **options):
        data = {
            'experiment': 'difficulty',
            'sigma_grid': list(options['sigma_grid']),
            'draws': options['draws'],
            'seeds': {'base': options['seed']},
            'output': options['output'],
        }
        try:
            config = parse_config(yaml.safe_dump(data), default_name='difficulty')
        except ConfigError as exc:
            raise config_error(exc) from exc
        self.execute_config(config, ledger=not options['no_ledger'])
