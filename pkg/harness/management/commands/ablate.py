"""
Retrieval-only versus joint training, across the three inference modes.

Usage:
    python manage.py ablate --retrieval-only ckpt_a --joint ckpt_b --out reports/
    python manage.py ablate --train --config configs/toy.cfg --out reports/
"""

from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from harness.management.harness_command import HarnessCommand
from harness.services.experiment_service import ablate, train_ablation_checkpoints


class Command(HarnessCommand):
    help = 'Compare retrieval-only and joint checkpoints (nDCG@5, LoRA-off identity, LoRA-on causal drift)'

    def add_command_arguments(self, parser):
        parser.add_argument('--retrieval-only', type=str, default=None, help='Retrieval-only checkpoint bundle')
        parser.add_argument('--joint', type=str, default=None, help='Jointly trained checkpoint bundle')
        parser.add_argument(
            '--train',
            action='store_true',
            help='Train both checkpoints from the same init before comparing'
        )
        parser.add_argument('--corpus', type=str, default=None, help='Training corpus for --train')
        parser.add_argument(
            '--held-out',
            type=int,
            default=settings.HYDRA['HELD_OUT_PAIRS'],
            help='Held-out pairs for nDCG@5 (default: HYDRA_HELD_OUT_PAIRS)'
        )
        parser.add_argument('--prompts', type=int, default=50, help='Generation prompts per mode')

    def run(self, **options):
        out = self.reports_dir(options['out'])
        if options['train']:
            corpus = self.load_corpus(options['corpus'])
            self.stdout.write(f"🏋️ Training retrieval-only and joint checkpoints on {len(corpus)} pairs...")
            checkpoints = train_ablation_checkpoints(self.model_cfg, self.train_cfg, corpus, Path(out) / 'checkpoints')
        elif options['retrieval_only'] and options['joint']:
            checkpoints = {'retrieval_only': options['retrieval_only'], 'joint': options['joint']}
        else:
            raise CommandError("give --retrieval-only and --joint, or --train", returncode=2)

        self.stdout.write("🔬 Running the three-mode ablation...")
        report = ablate(
            self.model_cfg,
            checkpoints,
            seed=self.seed,
            n_held_out=options['held_out'],
            n_gen_prompts=options['prompts'],
        )
        self.finish_report(report, out)
