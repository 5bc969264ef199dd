import json
import tempfile
from pathlib import Path

from django.conf import settings
from django.test import TestCase

from dualhead.backbone import Backbone
from dualhead.corpus import generate_corpus
from dualhead.generation import DecodeParams
from dualhead.tests.support import randomize_adapters, slow, tiny_config
from dualhead.training import TrainConfig, train
from harness.models import ExperimentRun
from harness.services.config_loader import load_experiment_config
from harness.services.experiment_service import (
    ExperimentReport,
    ablate,
    contamination,
    efficiency_suite,
    environment_stamp,
    evaluate_retrieval,
    equivalence_suite,
    parameter_bytes,
    record_run,
    train_ablation_checkpoints,
)


class ReportTests(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def sample_report(self):
        report = ExperimentReport('demo', {'seed': 1, 'config_hash': 'abc'})
        report.records = [{'value': 0.5}, {'value': 1.5}]
        report.summary = {'mean': 1.0}
        report.checks = {'mean_is_one': True}
        report.timings = {'seconds': 0.25}
        report.timing_checks = {'fast_enough': False}
        return report

    def test_passed_needs_timing_checks(self):
        report = self.sample_report()
        self.assertFalse(report.passed)
        report.timing_checks['fast_enough'] = True
        self.assertTrue(report.passed)

    def test_write_jsonl_and_table(self):
        path = self.sample_report().write(self.tmp.name)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        self.assertEqual(lines[0]['type'], 'report')
        self.assertFalse(lines[0]['passed'])
        self.assertEqual([line['index'] for line in lines[1:]], [0, 1])
        table = (Path(self.tmp.name) / 'demo.txt').read_text()
        self.assertIn('check: fast_enough', table)
        self.assertIn('FAILED', table)

    def test_comparable_leaves_out_timings(self):
        report = self.sample_report()
        other = self.sample_report()
        other.timings = {'seconds': 9.0}
        self.assertEqual(report.comparable(), other.comparable())

    def test_record_run(self):
        run = record_run(self.sample_report(), '/tmp/demo.jsonl')
        run = ExperimentRun.objects.get(pk=run.pk)
        self.assertEqual(run.status, 'completed')
        self.assertFalse(run.passed)
        self.assertEqual(run.summary, {'mean': 1.0})
        self.assertEqual([s.payload['value'] for s in run.samples.all()], [0.5, 1.5])

    def test_record_failed_run(self):
        run = record_run(self.sample_report(), error='boom')
        self.assertEqual(run.status, 'failed')
        self.assertIsNone(run.passed)
        self.assertEqual(run.error_message, 'boom')

    def test_environment_stamp(self):
        stamp = environment_stamp(3, tiny_config())
        self.assertEqual(stamp['seed'], 3)
        self.assertEqual(len(stamp['config_hash']), 64)


class EquivalenceAndContaminationTests(TestCase):
    def setUp(self):
        self.model = Backbone(tiny_config())
        randomize_adapters(self.model)

    def test_equivalence_suite(self):
        report = equivalence_suite(self.model, n_prompts=4, params=DecodeParams(max_new_tokens=6), seed=5)
        self.assertEqual(len(report.records), 8)
        self.assertEqual({r['strategy'] for r in report.records}, {'greedy', 'sampled'})
        self.assertEqual(report.summary['max_abs_anls_delta'], 0.0)
        self.assertTrue(report.passed, report.checks)

    def test_equivalence_is_reproducible(self):
        params = DecodeParams(max_new_tokens=4)
        first = equivalence_suite(self.model, n_prompts=3, params=params, seed=5)
        second = equivalence_suite(self.model, n_prompts=3, params=params, seed=5)
        self.assertEqual(first.comparable(), second.comparable())

    def test_contamination(self):
        report = contamination(self.model, n_inputs=4, seed=5, max_new_tokens=4)
        self.assertEqual(report.summary['n_inputs'], 4)
        self.assertEqual(report.summary['max_embedding_diff'], 0.0)
        self.assertTrue(report.passed, report.checks)


class EfficiencyTests(TestCase):
    def test_parameter_bytes(self):
        model = Backbone(tiny_config())
        single, two = parameter_bytes(model)
        adapters = sum(t.size for _, t in model.named_adapter_parameters())
        self.assertEqual(single - two // 2, 4 * adapters)
        self.assertLess(single, two)

    def test_untimed_checks(self):
        report = efficiency_suite(tiny_config(), seed=1, iterations=5, prompt_len=16, new_tokens=8)
        self.assertTrue(all(report.checks.values()), report.checks)
        self.assertEqual(set(report.timing_checks), {'switch_fraction_below_0.1', 'cache_speedup_at_least_2.0'})
        self.assertGreater(report.timings['generate_cached_seconds'], 0.0)
        self.assertEqual(report.summary['adapter_params_formula'], report.summary['adapter_params_enumerated'])


class RetrievalEvaluationTests(TestCase):
    def test_report_structure(self):
        model = Backbone(tiny_config())
        report = evaluate_retrieval(model, seed=4, n_held_out=12, untrained=Backbone(tiny_config()))
        self.assertEqual(report.name, 'eval_retrieval')
        self.assertEqual(len(report.records), 12)
        self.assertEqual(report.summary['trained_n_queries'], 12)
        # same weights on both sides
        self.assertEqual(report.summary['ndcg@5_gain'], 0.0)
        self.assertEqual(report.summary['gain_wilcoxon_p'], 1.0)
        self.assertEqual(set(report.checks), {'ndcg@5_at_least_0.9', 'gain_at_least_0.3'})
        self.assertFalse(report.checks['gain_at_least_0.3'])

    @slow
    def test_trained_model_beats_untrained(self):
        model_cfg, train_cfg = load_experiment_config(Path(settings.BASE_DIR) / 'configs' / 'toy.cfg')
        model = Backbone(model_cfg)
        train(model, generate_corpus(seed=42), train_cfg)
        report = evaluate_retrieval(model, seed=42)
        self.assertTrue(report.passed, report.summary)


class AblationTests(TestCase):
    def test_adapters_off_match_base_for_both_checkpoints(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        model_cfg = tiny_config()
        train_cfg = TrainConfig(batch_size=4, max_steps=6, log_every=0)
        paths = train_ablation_checkpoints(model_cfg, train_cfg, generate_corpus(16, seed=8), tmp.name)
        self.assertEqual(set(paths), {'retrieval_only', 'joint'})

        report = ablate(model_cfg, paths, seed=8, n_held_out=10, n_gen_prompts=3, max_new_tokens=4)
        self.assertTrue(report.checks['lora_off_identical_retrieval_only'])
        self.assertTrue(report.checks['lora_off_identical_joint'])
        self.assertGreater(report.summary['adapter_max_abs_diff'], 0.0)
        self.assertEqual(len(report.records), 6)
