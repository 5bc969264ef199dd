"""
Embed every page of a corpus and write the index file.

Usage: python manage.py index --checkpoint ckpt --corpus c.bin --out pages.idx
"""

from harness.management.harness_command import HarnessCommand
from harness.services.experiment_service import build_index


class Command(HarnessCommand):
    help = 'Build a multi-vector index over the pages of a corpus'
    out_required = True

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', type=str, default=None, help='Checkpoint bundle directory')
        parser.add_argument('--corpus', type=str, default=None, help='Corpus file (default: generated from --seed)')

    def run(self, **options):
        model = self.load_model(options['checkpoint'])
        corpus = self.load_corpus(options['corpus'])
        self.stdout.write(f"📚 Indexing {len(corpus)} pages...")
        index = build_index(model, corpus.pairs)
        index.save(options['out'])
        self.stdout.write(self.style.SUCCESS(f"✅ Indexed {len(index)} pages into {options['out']}"))
