import itertools
import math

import numpy as np
from django.test import SimpleTestCase
from scipy import stats

from dualhead.exceptions import InvalidInputError
from harness.services.statistics import paired_bootstrap_ci, tost_equivalence, wilcoxon_signed_rank


class TostTests(SimpleTestCase):
    def test_all_zero_deltas(self):
        result = tost_equivalence([0.0] * 100, epsilon=0.01)
        self.assertEqual(result.p_value, 0.0)
        self.assertEqual(result.ci, (0.0, 0.0))
        self.assertTrue(result.equivalent())

    def test_mean_outside_bound(self):
        deltas = 0.05 + np.random.default_rng(1).normal(0.0, 0.01, size=50)
        result = tost_equivalence(deltas, epsilon=0.01)
        self.assertGreater(result.p_value, 0.05)
        self.assertFalse(result.equivalent())

    def test_constant_outside_bound(self):
        self.assertEqual(tost_equivalence([0.05] * 10, epsilon=0.01).p_value, 1.0)

    def test_small_noise_against_direct_t_tails(self):
        deltas = np.random.default_rng(2).normal(0.0, 0.002, size=500)
        result = tost_equivalence(deltas, epsilon=0.01)
        self.assertLess(result.p_value, 0.001)

        mean, se = deltas.mean(), deltas.std(ddof=1) / math.sqrt(500)
        lower = 1.0 - stats.t.cdf((mean + 0.01) / se, 499)
        upper = stats.t.cdf((mean - 0.01) / se, 499)
        self.assertAlmostEqual(result.p_value, max(lower, upper), delta=1e-12)
        half_width = stats.t.ppf(0.95, 499) * se
        self.assertAlmostEqual(result.ci[0], mean - half_width, places=12)
        self.assertAlmostEqual(result.ci[1], mean + half_width, places=12)

    def test_needs_two_samples(self):
        with self.assertRaises(InvalidInputError):
            tost_equivalence([0.0])


class BootstrapTests(SimpleTestCase):
    def test_identical_series(self):
        result = paired_bootstrap_ci([0.3, 0.5, 0.9], [0.3, 0.5, 0.9])
        self.assertEqual((result.ci_lo, result.ci_hi), (0.0, 0.0))
        self.assertEqual(result.p_value, 1.0)

    def test_constant_shift(self):
        b = np.random.default_rng(3).random(20)
        result = paired_bootstrap_ci(b + 1.0, b, resamples=500)
        self.assertAlmostEqual(result.ci_lo, 1.0, places=12)
        self.assertAlmostEqual(result.ci_hi, 1.0, places=12)
        self.assertEqual(result.p_value, 0.0)

    def test_seeded_result_is_reproducible(self):
        a, b = np.random.default_rng(4).random((2, 30))
        self.assertEqual(paired_bootstrap_ci(a, b, seed=9), paired_bootstrap_ci(a, b, seed=9))

    def test_coverage(self):
        rng = np.random.default_rng(5)
        covered = 0
        trials = 400
        for trial in range(trials):
            a = rng.normal(0.3, 1.0, size=100)
            b = rng.normal(0.0, 1.0, size=100)
            result = paired_bootstrap_ci(a, b, resamples=1000, seed=trial)
            covered += result.ci_lo <= 0.3 <= result.ci_hi
        self.assertGreaterEqual(covered / trials, 0.90)

    def test_mismatched_lengths(self):
        with self.assertRaises(InvalidInputError):
            paired_bootstrap_ci([1.0, 2.0], [1.0])


def enumerated_p(diffs):
    """Two-sided p by listing every sign assignment of the ranked |differences|."""
    ranks = stats.rankdata(np.abs(diffs))
    observed = ranks[np.asarray(diffs) > 0].sum()
    sums = [sum(r for r, positive in zip(ranks, signs) if positive)
            for signs in itertools.product((False, True), repeat=len(ranks))]
    sums = np.array(sums)
    lower = np.mean(sums <= observed + 1e-9)
    upper = np.mean(sums >= observed - 1e-9)
    return min(1.0, 2.0 * min(lower, upper))


class WilcoxonTests(SimpleTestCase):
    def test_nine_pairs_match_exhaustive_enumeration(self):
        a = np.array([1.83, 0.50, 1.62, 2.48, 1.68, 1.88, 1.55, 3.06, 1.30])
        b = np.array([0.878, 0.647, 0.598, 2.05, 1.06, 1.29, 1.06, 3.14, 1.29])
        self.assertAlmostEqual(wilcoxon_signed_rank(a, b), enumerated_p(a - b), places=12)

    def test_tied_ranks_match_exhaustive_enumeration(self):
        a = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
        b = np.array([0.5, 2.5, 2.5, 3.0, 6.0, 4.0, 6.0, 7.0])
        self.assertAlmostEqual(wilcoxon_signed_rank(a, b), enumerated_p(a - b), places=12)

    def test_identical_samples(self):
        self.assertEqual(wilcoxon_signed_rank([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]), 1.0)

    def test_single_outlier_among_zeros(self):
        a = [0.0] * 8 + [5.0]
        b = [0.0] * 9
        # one effective pair: W+ is 0 or 1 with equal chance
        self.assertEqual(wilcoxon_signed_rank(a, b), 1.0)

    def test_large_sample_matches_normal_approximation(self):
        rng = np.random.default_rng(6)
        a = rng.normal(0.2, 1.0, size=60)
        b = rng.normal(0.0, 1.0, size=60)
        expected = stats.wilcoxon(a, b, zero_method='wilcox', correction=False, method='approx').pvalue
        self.assertAlmostEqual(wilcoxon_signed_rank(a, b), float(expected), places=10)
