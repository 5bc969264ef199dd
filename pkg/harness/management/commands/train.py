"""
Train the adapters and save a checkpoint bundle.

Usage: python manage.py train --config configs/toy.cfg --out checkpoints/joint [--corpus c.bin] [--mode joint]
"""

import json
from dataclasses import replace
from pathlib import Path

from django.core.management.base import CommandError

from dualhead.backbone import Backbone
from dualhead.training import TrainingMode, train
from harness.management.harness_command import HarnessCommand
from harness.services.checkpoint_service import register_checkpoint, save_checkpoint


class Command(HarnessCommand):
    help = 'Train the LoRA adapters on a corpus and write a checkpoint bundle to --out'
    out_required = True

    def add_command_arguments(self, parser):
        parser.add_argument('--corpus', type=str, default=None, help='Corpus file (default: generated from --seed)')
        parser.add_argument(
            '--mode',
            choices=[mode.value for mode in TrainingMode],
            default=None,
            help='Override TRAIN_MODE from the config'
        )
        parser.add_argument('--max-steps', type=int, default=None, help='Stop after this many optimizer steps')

    def run(self, **options):
        cfg = self.train_cfg
        if options['mode']:
            cfg = replace(cfg, mode=TrainingMode(options['mode']))
        if options['max_steps'] is not None:
            cfg = replace(cfg, max_steps=options['max_steps'])

        corpus = self.load_corpus(options['corpus'])
        self.stdout.write(f"🏋️ Training on {len(corpus)} pairs ({cfg.mode.value})...")
        model = Backbone(self.model_cfg)
        report = train(model, corpus, cfg)

        out = Path(options['out'])
        manifest = save_checkpoint(model, out)
        register_checkpoint(out, manifest)
        (out / 'train_report.json').write_text(json.dumps(report.to_dict(), indent=2))

        self.stdout.write(f"📉 Final loss: {report.losses[-1]:.4f} after {report.steps} steps")
        self.stdout.write(f"🔒 Base tensors changed: {report.base_checksum_delta}")
        if not report.lm_head_digest_match or report.base_checksum_delta:
            self.stdout.write(self.style.ERROR(
                f"❌ Frozen weights changed: lm_head {report.lm_head_digest_before[:12]} -> "
                f"{report.lm_head_digest_after[:12]}"
            ))
            raise CommandError("frozen weights changed during training", returncode=1)
        self.stdout.write(self.style.SUCCESS(f"✅ Checkpoint saved to {out}"))
