"""
Mode round-trip contamination check.

Usage: python manage.py contamination --checkpoint ckpt --inputs 50 --out reports/
"""

from django.conf import settings

from harness.management.harness_command import HarnessCommand
from harness.services.experiment_service import contamination


class Command(HarnessCommand):
    help = 'Check that embed/generate round trips reproduce single-pass outputs bit for bit'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', type=str, default=None, help='Checkpoint bundle directory')
        parser.add_argument(
            '--inputs',
            type=int,
            default=settings.HYDRA['CONTAMINATION_INPUTS'],
            help='Number of held-out inputs (default: HYDRA_CONTAMINATION_INPUTS)'
        )
        parser.add_argument('--max-new-tokens', type=int, default=8)

    def run(self, **options):
        model = self.load_model(options['checkpoint'])
        self.stdout.write(f"🧪 Round-tripping {options['inputs']} inputs...")
        report = contamination(model, options['inputs'], self.seed, options['max_new_tokens'])
        self.finish_report(report, options['out'])
