"""
Quantile table over WelfareReport JSON files.
Usage: python manage.py summarize "runs/sigma-sweep/reports/**/*.json" [--output summary.csv]
"""
from django.core.management.base import BaseCommand

from experiments.runner import FLOAT_FORMAT, SUMMARY_METRICS, summarize
from policies.exceptions import PolicyLabError

from ._common import runtime_error


class Command(BaseCommand):
    help = 'Summarize welfare reports as 0/10/25/50/75/90/100% quantiles plus the mean'

    def add_arguments(self, parser):
        parser.add_argument('pattern', type=str, help='Glob of report files (** is recursive)')
        parser.add_argument('--output', type=str, help='Write the table to this CSV file')
        parser.add_argument(
            '--metric',
            action='append',
            choices=SUMMARY_METRICS,
            help='Metric to summarize; repeat for several (default: all)',
        )

    def handle(self, *args, **options):
        metrics = tuple(options['metric']) if options['metric'] else SUMMARY_METRICS
        try:
            table = summarize(options['pattern'], metrics=metrics)
        except PolicyLabError as exc:
            raise runtime_error(exc) from exc

        if options['output']:
            table.to_csv(options['output'], index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
            self.stdout.write(self.style.SUCCESS(f'Wrote {len(table)} row(s) to {options["output"]}'))
        else:
            self.stdout.write(table.to_string(index=False))
