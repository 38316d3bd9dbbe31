"""
Run an experiment configuration.
Usage: python manage.py run configs/sigma_sweep.yaml [--seed 7] [--replications 10] [--workers 4]
"""
from experiments.config import load_config
from policies.exceptions import ConfigError

from ._common import ExperimentCommand, config_error


class Command(ExperimentCommand):
    help = 'Run a YAML experiment configuration and write its artifacts'

    def add_arguments(self, parser):
        parser.add_argument('config', type=str, help='Path to the YAML experiment configuration')
        parser.add_argument('--seed', type=int, help='Override seeds.base')
        parser.add_argument('--replications', type=int, help='Override seeds.replications')
        parser.add_argument('--horizon', type=int, help='Override the horizon T')
        parser.add_argument('--delta', type=float, help='Override the confidence parameter delta')
        parser.add_argument('--output', type=str, help='Override the output directory')
        parser.add_argument('--workers', type=int, help='Worker processes for replications')
        self.add_ledger_argument(parser)

    def handle(self, *args, **options):
        overrides = {name: options[name] for name in ('seed', 'replications', 'horizon', 'delta', 'output', 'workers')}
        try:
            config = load_config(options['config'], overrides=overrides)
        except ConfigError as exc:
            raise config_error(exc) from exc

        self.stdout.write(f'Running {config.experiment.value} from {options["config"]}...')
        self.execute_config(config, config_path=options['config'], ledger=not options['no_ledger'])
