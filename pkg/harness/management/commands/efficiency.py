"""
Parameter footprint, mode-switch latency and KV-cache speedup.

Usage: python manage.py efficiency --config configs/toy.cfg --out reports/
"""

from harness.management.harness_command import HarnessCommand
from harness.services.experiment_service import efficiency_suite


class Command(HarnessCommand):
    help = 'Measure single-model parameter bytes, switch latency and cached decoding speedup'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', type=str, default=None, help='Checkpoint bundle directory')
        parser.add_argument('--iterations', type=int, default=50, help='Mode round trips to time')
        parser.add_argument('--prompt-len', type=int, default=64)
        parser.add_argument('--new-tokens', type=int, default=64)

    def run(self, **options):
        model = self.load_model(options['checkpoint'])
        self.stdout.write("⏱️ Measuring efficiency...")
        report = efficiency_suite(
            model.config,
            seed=self.seed,
            iterations=options['iterations'],
            prompt_len=options['prompt_len'],
            new_tokens=options['new_tokens'],
            model=model,
        )
        self.finish_report(report, options['out'])
