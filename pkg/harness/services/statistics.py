"""
Statistics toolkit for the equivalence and retrieval comparisons.

- tost_equivalence: two one-sided t-tests against +/- epsilon
- paired_bootstrap_ci: seeded percentile interval for mean(a - b)
- wilcoxon_signed_rank: exact null for small samples, normal approximation beyond
"""

import logging
import math
from typing import NamedTuple, Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata
from scipy.stats import t as t_dist

from dualhead.exceptions import InvalidInputError

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25


class TostResult(NamedTuple):
    p_value: float
    ci: Tuple[float, float]

    def equivalent(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


class BootstrapResult(NamedTuple):
    ci_lo: float
    ci_hi: float
    p_value: float


def tost_equivalence(deltas: Sequence[float], epsilon: float = 0.01, alpha: float = 0.05) -> TostResult:
    """
    Two one-sided tests of |mean(deltas)| < epsilon.

    Returns the larger one-sided p-value and the (1 - 2*alpha) confidence
    interval of the mean. Zero-variance samples are decided analytically.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    n = deltas.size
    if n < 2:
        raise InvalidInputError("TOST needs at least two samples")
    if epsilon <= 0:
        raise InvalidInputError("equivalence bound must be positive")

    mean = float(deltas.mean())
    se = float(deltas.std(ddof=1)) / math.sqrt(n)
    if se == 0.0:
        p_value = 0.0 if abs(mean) < epsilon else 1.0
        return TostResult(p_value, (mean, mean))

    df = n - 1
    p_lower = float(t_dist.sf((mean + epsilon) / se, df))
    p_upper = float(t_dist.cdf((mean - epsilon) / se, df))
    margin = float(t_dist.ppf(1.0 - alpha, df)) * se
    return TostResult(max(p_lower, p_upper), (mean - margin, mean + margin))


def paired_bootstrap_ci(a: Sequence[float], b: Sequence[float], resamples: int = 10000,
                        level: float = 0.95, seed: int = 0) -> BootstrapResult:
    """Percentile CI of mean(a - b) over paired resamples; two-sided p from the sign proportion."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("paired samples must be 1-D and of equal length")
    if a.size < 2:
        raise InvalidInputError("bootstrap needs at least two pairs")
    if not 0.0 < level < 1.0:
        raise InvalidInputError("confidence level must be in (0, 1)")

    diffs = a - b
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, diffs.size, size=(resamples, diffs.size))
    means = diffs[picks].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100.0 * tail, 100.0 * (1.0 - tail)])

    if not np.any(diffs):
        p_value = 1.0
    else:
        p_value = min(1.0, 2.0 * min(float(np.mean(means <= 0.0)), float(np.mean(means >= 0.0))))
    return BootstrapResult(float(lo), float(hi), p_value)


def _exact_signed_rank_p(doubled_ranks: np.ndarray, observed: int) -> float:
    """Two-sided p for W+ (in doubled-rank units) under the 2**n equally likely sign assignments."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for rank in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[:total + 1 - rank]
        counts = counts + shifted
    assignments = float(2 ** doubled_ranks.size)
    lower = counts[:observed + 1].sum() / assignments
    upper = counts[observed:].sum() / assignments
    return min(1.0, 2.0 * min(lower, upper))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped. Up to 25 remaining pairs use the exact null
    distribution (tied ranks averaged); larger samples use the normal
    approximation with tie correction and no continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("paired samples must be 1-D and of equal length")

    diffs = a - b
    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n == 0:
        return 1.0

    ranks = rankdata(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        return _exact_signed_rank_p(doubled, int(round(2.0 * w_plus)))

    _, tie_counts = np.unique(ranks, return_counts=True)
    mean = n * (n + 1) / 4.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    if variance <= 0.0:
        return 1.0
    z = (w_plus - mean) / math.sqrt(variance)
    return float(min(1.0, 2.0 * norm.sf(abs(z))))
