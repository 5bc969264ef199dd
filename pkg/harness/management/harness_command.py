"""
Shared base for the harness management commands.

Every command takes --seed, --config and --out. Library errors become a
CommandError with exit status 1, and so does a report whose checks failed.
"""

import logging
from pathlib import Path
from typing import Optional

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from dualhead.backbone import Backbone
from dualhead.corpus import SyntheticCorpus, generate_corpus
from dualhead.exceptions import HydraError
from harness.services.checkpoint_service import load_checkpoint
from harness.services.config_loader import load_experiment_config
from harness.services.experiment_service import ExperimentReport, record_run

logger = logging.getLogger(__name__)


class HarnessCommand(BaseCommand):
    out_required = False

    def add_arguments(self, parser):
        parser.add_argument(
            '--seed',
            type=int,
            default=settings.HYDRA['SEED'],
            help='Experiment seed (default: HYDRA_SEED)'
        )
        parser.add_argument(
            '--config',
            type=str,
            default=None,
            help='KEY=value experiment config file'
        )
        parser.add_argument(
            '--out',
            type=str,
            required=self.out_required,
            default=None,
            help='Output path'
        )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        self.seed = options['seed']
        try:
            self.model_cfg, self.train_cfg = load_experiment_config(options['config'])
            self.run(**options)
        except HydraError as exc:
            logger.error("%s failed: %s", self.__module__.rsplit('.', 1)[-1], exc)
            self.stderr.write(self.style.ERROR(f"❌ {exc}"))
            raise CommandError(str(exc), returncode=1) from exc

    def run(self, **options):
        raise NotImplementedError('subclasses of HarnessCommand must provide a run() method')

    # Helpers

    def load_model(self, checkpoint: Optional[str]) -> Backbone:
        if checkpoint:
            self.stdout.write(f"📦 Loading checkpoint {checkpoint}")
            return load_checkpoint(checkpoint)
        self.stdout.write("🆕 No checkpoint given, using a freshly initialised model")
        return Backbone(self.model_cfg)

    def load_corpus(self, path: Optional[str]) -> SyntheticCorpus:
        if path:
            return SyntheticCorpus.load(path)
        return generate_corpus(seed=self.seed, patch_dim=self.model_cfg.patch_dim)

    def reports_dir(self, out: Optional[str]) -> Path:
        return Path(out) if out else settings.HYDRA['DATA_DIR'] / 'reports'

    def finish_report(self, report: ExperimentReport, out: Optional[str]):
        path = report.write(self.reports_dir(out))
        record_run(report, path)
        self.stdout.write(report.summary_table())
        self.stdout.write(f"📝 Report written to {path}")
        if not report.passed:
            failed = [name for name, ok in {**report.checks, **report.timing_checks}.items() if not ok]
            self.stdout.write(self.style.ERROR(f"❌ {report.name} failed: {', '.join(failed)}"))
            raise CommandError(f"{report.name} checks failed", returncode=1)
        self.stdout.write(self.style.SUCCESS(f"✅ {report.name} passed"))
