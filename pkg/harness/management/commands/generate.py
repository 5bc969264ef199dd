"""
Decode a continuation for a corpus page and its query, or for a text prompt.

Usage: python manage.py generate --checkpoint ckpt [--corpus c.bin --pair 3 | --text "abc"] [--temperature 0.7 --top-p 0.8]
"""

from dualhead.exceptions import InvalidInputError
from dualhead.generation import DecodeParams, Greedy, Sample, generate
from dualhead.modeswitch import Mode
from dualhead.vocab import decode_tokens, encode_text
from harness.management.harness_command import HarnessCommand


class Command(HarnessCommand):
    help = 'Generate tokens in generation mode (adapters off, causal attention)'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', type=str, default=None, help='Checkpoint bundle directory')
        parser.add_argument('--corpus', type=str, default=None, help='Corpus file (default: generated from --seed)')
        parser.add_argument('--pair', type=int, default=0, help='Corpus pair used as the prompt')
        parser.add_argument('--text', type=str, default=None, help='Plain text prompt (no page patches)')
        parser.add_argument('--max-new-tokens', type=int, default=32)
        parser.add_argument('--temperature', type=float, default=None, help='Sample instead of greedy decoding')
        parser.add_argument('--top-p', type=float, default=0.8)
        parser.add_argument(
            '--adapted',
            action='store_true',
            help='Decode with the adapters on (causal attention)'
        )

    def run(self, **options):
        model = self.load_model(options['checkpoint'])
        if options['text'] is not None:
            prompt, patches = encode_text(options['text']), None
        else:
            corpus = self.load_corpus(options['corpus'])
            if not 0 <= options['pair'] < len(corpus):
                raise InvalidInputError(f"pair {options['pair']} is outside the corpus (0..{len(corpus) - 1})")
            pair = corpus[options['pair']]
            prompt, patches = pair.query_tokens, pair.patches

        if options['temperature'] is None:
            strategy = Greedy()
        else:
            strategy = Sample(options['temperature'], options['top_p'], self.seed)
        params = DecodeParams(max_new_tokens=options['max_new_tokens'], strategy=strategy)
        mode = Mode.ADAPTED_GENERATION if options['adapted'] else Mode.GENERATION

        tokens = generate(model, prompt, patches, params, mode)
        self.stdout.write(f"🧾 Tokens: {tokens}")
        self.stdout.write(f"💬 Text: {decode_tokens(tokens)!r}")
