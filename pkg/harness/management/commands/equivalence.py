"""
Generation equivalence after mode-switch histories.

Usage: python manage.py equivalence --checkpoint ckpt --prompts 100 --out reports/
"""

from dualhead.generation import DecodeParams
from harness.management.harness_command import HarnessCommand
from harness.services.experiment_service import equivalence_suite


class Command(HarnessCommand):
    help = 'Compare generations of the toggled model with a pristine adapter-free copy (exact match + TOST)'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', type=str, default=None, help='Checkpoint bundle directory')
        parser.add_argument('--n', '--prompts', dest='prompts', type=int, default=100, help='Prompts per decoding strategy')
        parser.add_argument('--max-new-tokens', type=int, default=16)

    def run(self, **options):
        model = self.load_model(options['checkpoint'])
        self.stdout.write(f"⚖️ Running equivalence over {options['prompts']} prompts x 2 strategies...")
        report = equivalence_suite(
            model,
            n_prompts=options['prompts'],
            params=DecodeParams(max_new_tokens=options['max_new_tokens']),
            seed=self.seed,
        )
        self.finish_report(report, options['out'])
