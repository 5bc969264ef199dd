"""
Search an index with the query of one corpus pair.

Usage: python manage.py search --checkpoint ckpt --index pages.idx --corpus c.bin --pair 3 --k 5
"""

from dualhead.exceptions import InvalidInputError
from dualhead.retrieval import Index, embed, search
from harness.management.harness_command import HarnessCommand


class Command(HarnessCommand):
    help = 'Rank indexed pages against a corpus query by MaxSim'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', type=str, default=None, help='Checkpoint bundle directory')
        parser.add_argument('--index', type=str, required=True, help='Index file written by the index command')
        parser.add_argument('--corpus', type=str, default=None, help='Corpus file (default: generated from --seed)')
        parser.add_argument('--pair', type=int, default=0, help='Index of the corpus pair whose query to run')
        parser.add_argument('--k', type=int, default=5, help='Number of results')

    def run(self, **options):
        model = self.load_model(options['checkpoint'])
        index = Index.load(options['index'])
        corpus = self.load_corpus(options['corpus'])
        if not 0 <= options['pair'] < len(corpus):
            raise InvalidInputError(f"pair {options['pair']} is outside the corpus (0..{len(corpus) - 1})")
        pair = corpus[options['pair']]

        query = embed(model, pair.query_input(), is_query=True, source_id=pair.doc_id)
        result = search(index, query, options['k'])
        self.stdout.write(f"🔎 Query from {pair.doc_id}:")
        for rank, (doc_id, score) in enumerate(result.ranked, start=1):
            marker = ' ⭐' if doc_id == pair.doc_id else ''
            self.stdout.write(f"  {rank:>3}. {doc_id}  {score:.4f}{marker}")
