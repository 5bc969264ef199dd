"""
Write a seeded synthetic corpus file.

Usage: python manage.py gen_corpus --seed 7 --out c.bin
"""

from django.conf import settings

from dualhead.corpus import generate_corpus, held_out_corpus
from harness.management.harness_command import HarnessCommand


class Command(HarnessCommand):
    help = 'Generate a synthetic query/page corpus and write it in the binary corpus format'
    out_required = True

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--pairs',
            type=int,
            default=None,
            help='Number of pairs (default: 2000, or HYDRA_HELD_OUT_PAIRS with --held-out)'
        )
        parser.add_argument(
            '--held-out',
            action='store_true',
            help='Draw from the held-out stream instead of the training stream'
        )

    def run(self, **options):
        if options['held_out']:
            corpus = held_out_corpus(options['pairs'] or settings.HYDRA['HELD_OUT_PAIRS'], self.seed,
                                     self.model_cfg.patch_dim)
        else:
            corpus = generate_corpus(options['pairs'] or 2000, self.seed, self.model_cfg.patch_dim)
        corpus.save(options['out'])
        self.stdout.write(self.style.SUCCESS(f"✅ Wrote {len(corpus)} pairs to {options['out']}"))
