from django.core.management.base import BaseCommand

from policies.arrangement import harding
from policies.exceptions import PolicyLabError

from ._common import runtime_error


class Command(BaseCommand):
    help = 'Print the Harding number 2*sum_{j<=J} C(t-1, j), the largest coarsened LES class on t points'

    def add_arguments(self, parser):
        parser.add_argument('--t', type=int, required=True, help='Number of points')
        parser.add_argument('--j', type=int, required=True, help='Covariate dimension J')

    def handle(self, *args, **options):
        try:
            value = harding(options['t'], options['j'])
        except PolicyLabError as exc:
            raise runtime_error(exc) from exc
        self.stdout.write(str(value))
