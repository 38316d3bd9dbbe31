"""Shared plumbing for the experiment commands: exit codes and the run ledger."""
from django.core.management.base import BaseCommand, CommandError

from experiments.models import ExperimentRun
from experiments.runner import run_experiment
from policies.exceptions import ConfigError, PolicyLabError

CONFIG_ERROR = 2
RUNTIME_ERROR = 3


def config_error(exc):
    return CommandError(f"Config error: {exc}", returncode=CONFIG_ERROR)


def runtime_error(exc):
    return CommandError(f"{type(exc).__name__}: {exc}", returncode=RUNTIME_ERROR)


class ExperimentCommand(BaseCommand):
    """Base for commands that execute a RunConfig and record it in the ledger."""

    def add_ledger_argument(self, parser):
        parser.add_argument(
            '--no-ledger',
            action='store_true',
            help='Do not record this run in the ExperimentRun table',
        )

    def execute_config(self, config, config_path='', ledger=True):
        run = None
        if ledger:
            run = ExperimentRun.start(
                experiment=config.experiment.value,
                config=config.echo,
                config_path=config_path,
                output_dir=config.output,
                replications=config.replications,
                base_seed=config.base_seed,
            )
        try:
            result = run_experiment(config)
        except ConfigError as exc:
            if run is not None:
                run.mark_failed(exc)
            raise config_error(exc) from exc
        except PolicyLabError as exc:
            if run is not None:
                run.mark_failed(exc)
            raise runtime_error(exc) from exc
        except BaseException as exc:
            if run is not None:
                run.mark_failed(f"{type(exc).__name__}: {exc}")
            raise

        if run is not None:
            run.mark_completed(wall_time=result.wall_time, output_dir=result.output_dir)
        self.stdout.write(
            self.style.SUCCESS(
                f'{config.experiment.value} finished in {result.wall_time:.2f}s; '
                f'{len(result.files)} file(s) written to {result.output_dir}'
            )
        )
        return result
