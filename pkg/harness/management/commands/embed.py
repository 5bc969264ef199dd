"""
Embed one corpus page (or its query) and print or save the multi-vector embedding.

Usage: python manage.py embed --checkpoint ckpt --corpus c.bin --pair 3 [--query] [--out emb.npy]
"""

import numpy as np

from dualhead.exceptions import InvalidInputError
from dualhead.retrieval import embed
from harness.management.harness_command import HarnessCommand


class Command(HarnessCommand):
    help = 'Embed a corpus page or query in retrieval mode'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', type=str, default=None, help='Checkpoint bundle directory')
        parser.add_argument('--corpus', type=str, default=None, help='Corpus file (default: generated from --seed)')
        parser.add_argument('--pair', type=int, default=0, help='Index of the corpus pair to embed')
        parser.add_argument('--query', action='store_true', help='Embed the query instead of the page')

    def run(self, **options):
        model = self.load_model(options['checkpoint'])
        corpus = self.load_corpus(options['corpus'])
        if not 0 <= options['pair'] < len(corpus):
            raise InvalidInputError(f"pair {options['pair']} is outside the corpus (0..{len(corpus) - 1})")
        pair = corpus[options['pair']]

        inp = pair.query_input() if options['query'] else pair.document_input()
        embedding = embed(model, inp, is_query=options['query'], source_id=pair.doc_id)
        kind = 'query' if options['query'] else 'page'
        self.stdout.write(f"🔎 {kind} {pair.doc_id}: {embedding.num_tokens} vectors x {embedding.dim} dims")

        if options['out']:
            np.save(options['out'], embedding.vectors)
            self.stdout.write(self.style.SUCCESS(f"✅ Saved embedding to {options['out']}"))
        else:
            np.set_printoptions(precision=4, suppress=True)
            self.stdout.write(str(embedding.vectors))
