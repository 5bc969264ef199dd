import math
from dataclasses import replace
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from dualhead.backbone import Backbone, count_trainable_params
from dualhead.corpus import SyntheticCorpus, generate_corpus, held_out_corpus
from dualhead.exceptions import ConfigError, InvalidInputError, TrainingDivergedError
from dualhead.generation import DecodeParams, generate
from dualhead.modeswitch import Mode, verify_lm_head
from dualhead.retrieval import MultiVecEmbedding
from dualhead.tensorcore import Tensor, float64_precision, no_grad, tensor_digest
from dualhead.training import (
    AdamW, GradientBucketSync, TrainConfig, TrainingMode, apply_fault_flags, batch_loss, colbert_loss,
    generation_batch_loss, is_generation_step, lr_at, round_to_bfloat16, train, train_joint, warmup_steps,
)

from .support import randomize_adapters, tiny_config


def unit_rows(rng, n, dim):
    rows = rng.normal(size=(n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def direct_loss(queries, docs, temperature):
    scores = np.array([[float((q @ d.T).max(axis=1).sum()) for d in docs] for q in queries]) / temperature
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-np.mean(np.diag(log_probs)))


class ColbertLossTests(SimpleTestCase):
    def test_single_pair_has_zero_loss(self):
        v = MultiVecEmbedding([[1.0, 0.0]])
        self.assertEqual(colbert_loss([v], [v], 0.02).item(), 0.0)

    def test_symmetric_scores_give_ln2(self):
        v = MultiVecEmbedding([[0.6, 0.8]])
        self.assertAlmostEqual(colbert_loss([v, v], [v, v], 0.02).item(), math.log(2), places=6)

    def test_matches_direct_log_softmax(self):
        rng = np.random.default_rng(20)
        queries = [unit_rows(rng, 3, 6) for _ in range(4)]
        docs = [unit_rows(rng, 5, 6) for _ in range(4)]
        loss = colbert_loss([Tensor(q) for q in queries], [Tensor(d) for d in docs], 1.0).item()
        self.assertAlmostEqual(loss, direct_loss(queries, docs, 1.0), places=5)

    def test_ragged_lengths_match_direct_log_softmax(self):
        rng = np.random.default_rng(21)
        queries = [unit_rows(rng, n, 6) for n in (2, 3, 4, 1)]
        docs = [unit_rows(rng, n, 6) for n in (5, 2, 3, 4)]
        loss = colbert_loss([Tensor(q) for q in queries], [Tensor(d) for d in docs], 0.5).item()
        self.assertAlmostEqual(loss, direct_loss(queries, docs, 0.5), places=5)

    def test_empty_batch(self):
        with self.assertRaises(InvalidInputError):
            colbert_loss([], [], 0.02)


class ScheduleTests(SimpleTestCase):
    def setUp(self):
        self.cfg = TrainConfig(lr=5e-5, warmup_frac=0.08)

    def test_warmup_and_cosine_endpoints(self):
        self.assertEqual(warmup_steps(100, self.cfg), 8)
        self.assertEqual(lr_at(0, 100, self.cfg), 0.0)
        self.assertEqual(lr_at(8, 100, self.cfg), 5e-5)
        self.assertLess(abs(lr_at(100, 100, self.cfg)), 1e-12)
        self.assertAlmostEqual(lr_at(4, 100, self.cfg), 2.5e-5)

    def test_zero_warmup_starts_at_full_rate(self):
        cfg = TrainConfig(lr=1e-3, warmup_frac=0.0)
        self.assertEqual(warmup_steps(10, cfg), 0)
        self.assertEqual(lr_at(0, 10, cfg), 1e-3)

    def test_non_increasing_after_warmup(self):
        rates = [lr_at(step, 50, self.cfg) for step in range(warmup_steps(50, self.cfg), 51)]
        self.assertTrue(all(a >= b for a, b in zip(rates, rates[1:])))

    def test_generation_interleave(self):
        flags = [is_generation_step(step, 0.2) for step in range(10)]
        self.assertEqual(sum(flags), 2)
        self.assertEqual([step for step, flag in enumerate(flags) if flag], [4, 9])

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            TrainConfig(temperature=0)
        with self.assertRaises(ConfigError):
            TrainConfig(gen_frac=1.0)
        with self.assertRaises(ConfigError):
            TrainConfig(max_steps=0)


class OptimizerTests(SimpleTestCase):
    def test_adamw_first_step_moves_by_lr(self):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        p.grad = np.array([0.5, -2.0], dtype=np.float32)
        AdamW([p], lr=0.1, weight_decay=0.0).step()
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)

    def test_bfloat16_rounding_ties_to_even(self):
        values = np.array([1.0, 1.0 + 2 ** -8, 1.0 + 3 * 2 ** -8, -2.0], dtype=np.float32)
        np.testing.assert_array_equal(round_to_bfloat16(values), [1.0, 1.0, 1.0 + 2 ** -6, -2.0])

    def test_bucket_sync_only_with_spurious_accumulation(self):
        t = Tensor(np.array([1.0 + 2 ** -10]), requires_grad=True)
        GradientBucketSync([t]).sync()
        self.assertIsNone(t.grad)
        GradientBucketSync([t], spurious_accumulation=True).sync()
        self.assertEqual(t.data[0], 1.0)
        np.testing.assert_array_equal(t.grad, [0.0])


class RetrievalTrainingTests(SimpleTestCase):
    def setUp(self):
        self.corpus = generate_corpus(40, seed=2)
        self.cfg = TrainConfig(batch_size=4, max_steps=100, log_every=0)

    def test_base_and_lm_head_untouched(self):
        model = Backbone(tiny_config())
        digest = tensor_digest(model.lm_head)
        report = train(model, self.corpus, self.cfg)
        self.assertEqual(report.steps, 100)
        self.assertEqual(report.base_checksum_delta, 0)
        self.assertTrue(report.lm_head_digest_match)
        self.assertTrue(verify_lm_head(model, digest))
        self.assertEqual(report.trainable_params, count_trainable_params(model.config))
        self.assertIs(model.mode, Mode.GENERATION)
        self.assertTrue(any(t.data.any() for name, t in model.named_adapter_parameters() if 'lora_B' in name))

    def test_tied_lm_head_fault_is_detected(self):
        model = Backbone(tiny_config())
        report = train(model, self.corpus, replace(self.cfg, fault_tied_lm_head=True))
        self.assertFalse(report.lm_head_digest_match)
        self.assertFalse(verify_lm_head(model, report.lm_head_digest_before))

    def test_unfrozen_lm_head_drifts_under_spurious_accumulation(self):
        model = Backbone(tiny_config())
        cfg = replace(self.cfg, max_steps=10, fault_unfrozen_lm_head=True, spurious_grad_accumulation=True)
        self.assertFalse(train(model, self.corpus, cfg).lm_head_digest_match)

    def test_unfrozen_lm_head_alone_stays_put(self):
        model = Backbone(tiny_config())
        cfg = replace(self.cfg, max_steps=10, fault_unfrozen_lm_head=True)
        self.assertTrue(train(model, self.corpus, cfg).lm_head_digest_match)

    def test_fault_flags_are_undone_after_training(self):
        model = Backbone(tiny_config())
        train(model, self.corpus, replace(self.cfg, max_steps=5, fault_tied_lm_head=True,
                                          fault_unfrozen_lm_head=True))
        self.assertTrue(model.lm_head_is_tied)
        self.assertFalse(model.embedding.requires_grad)
        self.assertFalse(model.lm_head.requires_grad)
        adapters = {id(t) for _, t in model.named_adapter_parameters()}
        self.assertEqual({id(t) for t in model.trainable_parameters()}, adapters)

    def test_fault_flags_are_undone_when_training_diverges(self):
        model = Backbone(tiny_config())
        nan_loss = Tensor(np.array(np.nan), requires_grad=True)
        with mock.patch('dualhead.training.batch_loss', return_value=nan_loss):
            with self.assertLogs('dualhead.training', level='ERROR'):
                with self.assertRaises(TrainingDivergedError):
                    train(model, self.corpus, replace(self.cfg, max_steps=3, fault_unfrozen_lm_head=True))
        self.assertFalse(model.lm_head.requires_grad)

    def test_training_reduces_loss_on_a_fixed_batch(self):
        model = Backbone(tiny_config())
        corpus = generate_corpus(8, seed=5)
        cfg = TrainConfig(batch_size=8, max_steps=40, lr=1e-2, warmup_frac=0.0, log_every=0)
        with no_grad():
            before = batch_loss(model, corpus.pairs, cfg, training=False).item()
        train(model, corpus, cfg)
        with no_grad():
            after = batch_loss(model, corpus.pairs, cfg, training=False).item()
        self.assertLess(after, before)

    def test_non_finite_loss_aborts_with_diagnostics(self):
        model = Backbone(tiny_config())
        nan_loss = Tensor(np.array(np.nan), requires_grad=True)
        with mock.patch('dualhead.training.batch_loss', return_value=nan_loss):
            with self.assertLogs('dualhead.training', level='ERROR'):
                with self.assertRaises(TrainingDivergedError) as caught:
                    train(model, self.corpus, replace(self.cfg, max_steps=3))
        self.assertEqual(caught.exception.diagnostics['step'], 0)
        self.assertIs(model.mode, Mode.GENERATION)

    def test_empty_corpus(self):
        with self.assertRaises(InvalidInputError):
            train(Backbone(tiny_config()), SyntheticCorpus([], 0), self.cfg)


class JointTrainingTests(SimpleTestCase):
    def test_interleaves_generation_batches(self):
        model = Backbone(tiny_config())
        corpus = generate_corpus(12, seed=6)
        cfg = TrainConfig(batch_size=2, max_steps=10, mode=TrainingMode.JOINT, log_every=0)
        report = train(model, corpus, cfg)
        self.assertEqual(report.generation_steps, 2)
        self.assertEqual(report.base_checksum_delta, 0)
        self.assertTrue(report.lm_head_digest_match)

    def test_requires_joint_mode(self):
        corpus = generate_corpus(4, seed=6)
        with self.assertRaises(ConfigError):
            train_joint(Backbone(tiny_config()), corpus, corpus.generation_examples(), TrainConfig())


class BatchLossTests(SimpleTestCase):
    def setUp(self):
        self.model = Backbone(tiny_config())
        randomize_adapters(self.model)
        self.corpus = generate_corpus(8, seed=13)
        self.cfg = TrainConfig()

    def test_reordering_pairs_leaves_loss_unchanged(self):
        with no_grad(), float64_precision():
            reference = batch_loss(self.model, self.corpus.pairs, self.cfg).item()
            for seed in range(5):
                order = np.random.default_rng(seed).permutation(len(self.corpus))
                shuffled = [self.corpus[int(i)] for i in order]
                self.assertAlmostEqual(batch_loss(self.model, shuffled, self.cfg).item(), reference, delta=1e-6)

    def test_default_calls_are_deterministic(self):
        pairs = self.corpus.pairs[:4]
        first = batch_loss(self.model, pairs, self.cfg).item()
        self.assertEqual(batch_loss(self.model, pairs, self.cfg).item(), first)
        examples = self.corpus.generation_examples()[:2]
        first = generation_batch_loss(self.model, examples).item()
        self.assertEqual(generation_batch_loss(self.model, examples).item(), first)

    def test_training_forward_needs_an_rng(self):
        with self.assertRaises(InvalidInputError):
            batch_loss(self.model, self.corpus.pairs[:2], self.cfg, training=True)
        with self.assertRaises(InvalidInputError):
            generation_batch_loss(self.model, self.corpus.generation_examples()[:2], training=True)

    def test_seeded_training_losses_repeat(self):
        pairs = self.corpus.pairs[:4]
        first = batch_loss(self.model, pairs, self.cfg, np.random.default_rng(1), training=True).item()
        second = batch_loss(self.model, pairs, self.cfg, np.random.default_rng(1), training=True).item()
        self.assertEqual(first, second)


class GradientFlowTests(SimpleTestCase):
    """After backward, gradient sits on the adapters and nowhere in the frozen base."""

    def setUp(self):
        self.model = Backbone(tiny_config())
        randomize_adapters(self.model)
        self.model.freeze_base()
        self.corpus = generate_corpus(4, seed=11)
        self.rng = np.random.default_rng(0)

    def assertGradientOnlyOnAdapters(self, unused_prefix=()):
        frozen = self.model.named_base_parameters() + [('lm_head.weight', self.model.lm_head)]
        for name, tensor in frozen:
            with self.subTest(frozen=name):
                self.assertTrue(tensor.grad is None or not tensor.grad.any())
        for name, tensor in self.model.named_adapter_parameters():
            if name.startswith(unused_prefix):
                continue
            with self.subTest(adapter=name):
                self.assertIsNotNone(tensor.grad)
                self.assertTrue(tensor.grad.any())

    def test_retrieval_loss(self):
        batch_loss(self.model, self.corpus.pairs, TrainConfig(), self.rng, training=True).backward()
        self.assertGradientOnlyOnAdapters()

    def test_generation_loss(self):
        examples = self.corpus.generation_examples()[:2]
        generation_batch_loss(self.model, examples, self.rng, training=True).backward()
        # the retrieval projection is not on the causal next-token path
        self.assertGradientOnlyOnAdapters(unused_prefix=('custom_text_proj',))


class TrainingAndModeSwitchTests(SimpleTestCase):
    def setUp(self):
        self.params = DecodeParams(max_new_tokens=8)

    def generations(self, model, pairs, mode=Mode.GENERATION):
        return [generate(model, pair.query_tokens, pair.patches, self.params, mode) for pair in pairs]

    def test_retrieval_training_leaves_base_generation_unchanged(self):
        model = Backbone(tiny_config())
        prompts = held_out_corpus(5, seed=14)
        before = self.generations(model, prompts)
        cfg = TrainConfig(batch_size=4, max_steps=20, lr=1e-2, warmup_frac=0.0, log_every=0)
        train(model, generate_corpus(16, seed=14), cfg)
        self.assertEqual(self.generations(model, prompts), before)
        self.assertEqual(self.generations(model.clone_base(), prompts), before)

    def test_joint_training_changes_adapted_generation(self):
        model = Backbone(tiny_config())
        corpus = generate_corpus(16, seed=15)
        cfg = TrainConfig(batch_size=4, max_steps=20, lr=1e-2, warmup_frac=0.0, mode=TrainingMode.JOINT,
                          gen_frac=0.5, log_every=0)
        train_joint(model, corpus, corpus.generation_examples(), cfg)
        prompts = held_out_corpus(10, seed=15)
        base = self.generations(model, prompts)
        adapted = self.generations(model, prompts, Mode.ADAPTED_GENERATION)
        self.assertGreater(sum(a != b for a, b in zip(adapted, base)), len(prompts) // 2)

    def test_one_small_step_lowers_the_loss_on_random_batches(self):
        corpus = generate_corpus(40, seed=16)
        cfg = TrainConfig()
        for case in range(10):
            rng = np.random.default_rng([16, case])
            batch = [corpus[int(i)] for i in rng.choice(len(corpus), size=4, replace=False)]
            model = Backbone(tiny_config(seed=case))
            owned = apply_fault_flags(model, cfg)
            loss = batch_loss(model, batch, cfg)
            loss.backward()
            AdamW(owned, lr=1e-4, weight_decay=0.0).step()
            with no_grad():
                after = batch_loss(model, batch, cfg).item()
            with self.subTest(case=case):
                self.assertLess(after, loss.item())
