import io
import json
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

from django.test import TransactionTestCase

from harness.cli import cli
from harness.models import CheckpointRecord, ExperimentRun

SMALL_CONFIG = """\
HIDDEN_DIM=16
NUM_LAYERS=2
LAYER_SCHEDULE=full,sliding:4
NUM_HEADS=2
FFN_DIM=32
PROJ_DIM=8
LORA_RANK=4
LORA_ALPHA=16
MAX_SEQ_LEN=96
BATCH_SIZE=4
LOG_EVERY=0
"""


class CliTests(TransactionTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)
        self.config = self.tmp / 'small.cfg'
        self.config.write_text(SMALL_CONFIG)

    def run_cli(self, *argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        with redirect_stdout(stdout), redirect_stderr(stderr):
            code = cli(list(argv))
        return code, stdout.getvalue(), stderr.getvalue()

    def test_unknown_subcommand(self):
        code, _, stderr = self.run_cli('frobnicate')
        self.assertEqual(code, 2)
        self.assertIn('unknown subcommand: frobnicate', stderr)

    def test_no_subcommand(self):
        code, _, stderr = self.run_cli()
        self.assertEqual(code, 2)
        self.assertIn('usage: hydra', stderr)

    def test_bad_flag_is_a_usage_error(self):
        code, _, _ = self.run_cli('generate', '--no-such-flag')
        self.assertEqual(code, 2)

    def test_gen_corpus_is_bit_reproducible(self):
        first, second = self.tmp / 'a.bin', self.tmp / 'b.bin'
        self.assertEqual(self.run_cli('gen-corpus', '--seed', '7', '--pairs', '20', '--out', str(first))[0], 0)
        self.assertEqual(self.run_cli('gen-corpus', '--seed', '7', '--pairs', '20', '--out', str(second))[0], 0)
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_equivalence(self):
        code, stdout, _ = self.run_cli('equivalence', '--config', str(self.config), '--n', '2',
                                       '--max-new-tokens', '3', '--out', str(self.tmp / 'reports'))
        self.assertEqual(code, 0, stdout)
        self.assertIn('equivalence passed', stdout)
        self.assertTrue((self.tmp / 'reports' / 'equivalence.jsonl').is_file())
        self.assertEqual(ExperimentRun.objects.get().name, 'equivalence')

    def test_train_then_contamination(self):
        corpus = self.tmp / 'corpus.bin'
        bundle = self.tmp / 'ckpt'
        self.assertEqual(self.run_cli('gen-corpus', '--pairs', '8', '--out', str(corpus))[0], 0)

        code, stdout, _ = self.run_cli('train', '--config', str(self.config), '--corpus', str(corpus),
                                       '--max-steps', '2', '--out', str(bundle))
        self.assertEqual(code, 0, stdout)
        train_report = json.loads((bundle / 'train_report.json').read_text())
        self.assertEqual(train_report['base_checksum_delta'], 0.0)
        self.assertTrue(CheckpointRecord.objects.filter(bundle_path=str(bundle.resolve())).exists())

        code, stdout, _ = self.run_cli('contamination', '--checkpoint', str(bundle), '--inputs', '2',
                                       '--max-new-tokens', '2', '--out', str(self.tmp / 'reports'))
        self.assertEqual(code, 0, stdout)

    def test_missing_checkpoint_exits_one(self):
        code, _, stderr = self.run_cli('contamination', '--checkpoint', str(self.tmp / 'missing'),
                                       '--inputs', '1', '--out', str(self.tmp / 'reports'))
        self.assertEqual(code, 1)
        self.assertIn('no checkpoint manifest', stderr)
