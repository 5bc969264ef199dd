"""
Held-out retrieval quality.

Usage: python manage.py eval_retrieval --checkpoint ckpt --out reports/
"""

from django.conf import settings

from harness.management.harness_command import HarnessCommand
from harness.services.experiment_service import evaluate_retrieval


class Command(HarnessCommand):
    help = 'nDCG@5, Recall@k and MRR on held-out pairs, against an untrained model'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', type=str, default=None, help='Checkpoint bundle directory')
        parser.add_argument(
            '--held-out',
            type=int,
            default=settings.HYDRA['HELD_OUT_PAIRS'],
            help='Held-out pairs (default: HYDRA_HELD_OUT_PAIRS)'
        )

    def run(self, **options):
        model = self.load_model(options['checkpoint'])
        self.stdout.write(f"📊 Evaluating retrieval on {options['held_out']} held-out pairs...")
        report = evaluate_retrieval(model, self.seed, options['held_out'])
        self.finish_report(report, options['out'])
