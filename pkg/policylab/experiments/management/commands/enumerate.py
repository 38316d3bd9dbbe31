"""
Enumerate the LES cells induced by a CSV of points.
Usage: python manage.py enumerate points.csv --dim 2 [--output four-points]
"""
from pathlib import Path

import yaml

from experiments.config import parse_config
from policies.exceptions import ConfigError

from ._common import ExperimentCommand, config_error


class Command(ExperimentCommand):
    help = 'Write the cell catalog (label, beta_0..beta_J) of the arrangement defined by a points CSV'

    def add_arguments(self, parser):
        parser.add_argument('points', type=str, help='CSV with columns x1..xJ, one point per row')
        parser.add_argument('--dim', type=int, required=True, help='Covariate dimension J')
        parser.add_argument('--output', type=str, default='enumerate', help='Output directory')
        parser.add_argument('--workers', type=int, help='Worker processes for the LP solves')
        self.add_ledger_argument(parser)

    def handle(self, *args, **options):
        data = {
            'experiment': 'enumerate',
            'points': str(Path(options['points']).resolve()),
            'dim': options['dim'],
            'output': options['output'],
        }
        if options['workers'] is not None:
            data['enumeration_workers'] = options['workers']
        try:
            config = parse_config(yaml.safe_dump(data), default_name='enumerate')
        except ConfigError as exc:
            raise config_error(exc) from exc
        self.execute_config(config, config_path=options['points'], ledger=not options['no_ledger'])
