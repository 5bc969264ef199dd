import itertools

import numpy as np
from django.test import SimpleTestCase

from dualhead.exceptions import MaskError
from dualhead.masks import (
    MaskKind, build_bidirectional_mask, build_causal_mask, build_sliding_causal_mask,
)


def nested_loop_causal(validity):
    n = len(validity)
    grid = np.full((n, n), -np.inf, dtype=np.float32)
    for i in range(n):
        for j in range(n):
            if j <= i and validity[i] and validity[j]:
                grid[i, j] = 0.0
    return grid


def nested_loop_bidirectional(validity):
    n = len(validity)
    grid = np.full((n, n), -np.inf, dtype=np.float32)
    for i in range(n):
        for j in range(n):
            if validity[i] and validity[j]:
                grid[i, j] = 0.0
    return grid


def all_validity_patterns(max_len):
    for n in range(1, max_len + 1):
        yield from itertools.product((False, True), repeat=n)


class CausalMaskTests(SimpleTestCase):
    def test_three_valid_positions(self):
        mask = build_causal_mask([True, True, True])
        self.assertEqual(mask.values.shape, (1, 1, 3, 3))
        zeros = {(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)}
        for i, j in itertools.product(range(3), repeat=2):
            if (i, j) in zeros:
                self.assertEqual(mask.grid[i, j], 0.0)
            else:
                self.assertTrue(np.isneginf(mask.grid[i, j]))

    def test_single_token(self):
        np.testing.assert_array_equal(build_causal_mask([True]).values, np.zeros((1, 1, 1, 1)))

    def test_padding_in_the_middle(self):
        validity = [True, False, True]
        np.testing.assert_array_equal(build_causal_mask(validity).grid, nested_loop_causal(validity))

    def test_every_pattern_up_to_ten_matches_nested_loops(self):
        for validity in all_validity_patterns(10):
            np.testing.assert_array_equal(build_causal_mask(validity).grid, nested_loop_causal(validity),
                                          err_msg=str(validity))

    def test_empty_validity(self):
        with self.assertRaises(MaskError):
            build_causal_mask([])


class BidirectionalMaskTests(SimpleTestCase):
    def test_no_padding_is_all_zero(self):
        mask = build_bidirectional_mask(build_causal_mask([True, True, True]))
        np.testing.assert_array_equal(mask.grid, np.zeros((3, 3)))
        self.assertIs(mask.kind, MaskKind.BIDIRECTIONAL)

    def test_trailing_padding(self):
        grid = build_bidirectional_mask(build_causal_mask([True, True, False])).grid
        np.testing.assert_array_equal(grid[:2, :2], np.zeros((2, 2)))
        self.assertTrue(np.isneginf(grid[2]).all())
        self.assertTrue(np.isneginf(grid[:, 2]).all())

    def test_every_pattern_up_to_ten_matches_nested_loops(self):
        for validity in all_validity_patterns(10):
            mask = build_bidirectional_mask(build_causal_mask(validity))
            np.testing.assert_array_equal(mask.grid, nested_loop_bidirectional(validity))
            self.assertTrue(mask.is_symmetric())
            self.assertEqual(mask.validity, tuple(validity))

    def test_must_come_from_a_causal_mask(self):
        sliding = build_sliding_causal_mask([True, True], window=1)
        with self.assertRaises(MaskError):
            build_bidirectional_mask(sliding)


class SlidingMaskTests(SimpleTestCase):
    def test_window_limits_lookback(self):
        grid = build_sliding_causal_mask([True] * 5, window=2).grid
        for i, j in itertools.product(range(5), repeat=2):
            allowed = j <= i and i - j < 2
            self.assertEqual(grid[i, j] == 0.0, allowed)

    def test_window_larger_than_sequence_is_causal(self):
        validity = [True, False, True, True]
        np.testing.assert_array_equal(build_sliding_causal_mask(validity, window=8).grid,
                                      build_causal_mask(validity).grid)

    def test_window_must_be_positive(self):
        with self.assertRaises(MaskError):
            build_sliding_causal_mask([True], window=0)


class UsableBiasTests(SimpleTestCase):
    def test_padding_row_attends_to_itself_only(self):
        bias = build_causal_mask([True, False, True]).usable_bias()
        self.assertEqual(bias[1, 1], 0.0)
        self.assertTrue(np.isneginf(bias[1, [0, 2]]).all())
        self.assertTrue(np.isneginf(bias[2, 1]))

    def test_query_start_slices_rows(self):
        mask = build_causal_mask([True] * 4)
        np.testing.assert_array_equal(mask.usable_bias(3), mask.grid[3:])
        self.assertEqual(mask.usable_bias(3).shape, (1, 4))
