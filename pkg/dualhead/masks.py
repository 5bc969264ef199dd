"""
Additive attention masks (0 / -inf) for the dual-head backbone.

Causal masks drive generation, bidirectional masks drive retrieval on the
full-attention layers, and sliding-window layers always use a windowed
causal mask whatever the mode.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from .exceptions import MaskError

NEG_INF = np.float32(-np.inf)


class MaskKind(Enum):
    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"
    SLIDING_CAUSAL = "sliding_causal"


@dataclass(frozen=True)
class AttentionMask:
    """A [1, 1, seq, seq] additive mask plus the per-position validity it was built from."""

    values: np.ndarray
    validity: Tuple[bool, ...]
    kind: MaskKind
    window: Optional[int] = None

    @property
    def seq_len(self) -> int:
        return self.values.shape[-1]

    @property
    def grid(self) -> np.ndarray:
        """The [seq, seq] block without the two leading unit axes."""
        return self.values[0, 0]

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.grid, self.grid.T))

    def usable_bias(self, query_start: int = 0) -> np.ndarray:
        """
        Rows query_start.. of the mask, ready to add to attention scores.

        A padding position has an all -inf row; it is let through to itself
        only so softmax stays defined. Its output is discarded later.
        """
        bias = self.grid[query_start:].copy()
        dead_rows = np.nonzero(np.isneginf(bias).all(axis=1))[0]
        if dead_rows.size:
            positions = dead_rows + query_start
            if np.array(self.validity, dtype=bool)[positions].any():
                raise MaskError("a valid position has no attention target")
            bias[dead_rows, positions] = 0.0
        return bias


def _validity(validity: Sequence[bool]) -> Tuple[bool, ...]:
    flags = tuple(bool(v) for v in validity)
    if not flags:
        raise MaskError("mask needs at least one position")
    return flags


def _pack(allowed: np.ndarray) -> np.ndarray:
    values = np.where(allowed, np.float32(0.0), NEG_INF).astype(np.float32)
    return values[None, None, :, :]


def build_causal_mask(validity: Sequence[bool]) -> AttentionMask:
    """values[i, j] = 0 iff j <= i and both positions are valid."""
    flags = _validity(validity)
    valid = np.array(flags, dtype=bool)
    n = valid.size
    allowed = np.tril(np.ones((n, n), dtype=bool)) & valid[:, None] & valid[None, :]
    return AttentionMask(_pack(allowed), flags, MaskKind.CAUSAL)


def build_bidirectional_mask(causal: AttentionMask) -> AttentionMask:
    """
    Symmetric mask over the valid positions of a causal mask.

    Validity is read back from the causal mask's diagonal (0 means valid);
    every valid position may attend to every other valid position.
    """
    if causal.kind is not MaskKind.CAUSAL:
        raise MaskError(f"bidirectional mask must be derived from a causal mask, got {causal.kind.value}")
    valid = np.diagonal(causal.grid) == 0
    allowed = valid[:, None] & valid[None, :]
    return AttentionMask(_pack(allowed), tuple(bool(v) for v in valid), MaskKind.BIDIRECTIONAL)


def build_sliding_causal_mask(validity: Sequence[bool], window: int) -> AttentionMask:
    """Causal mask restricted to the last `window` positions (i - window < j <= i)."""
    if window < 1:
        raise MaskError("sliding window must be at least 1")
    flags = _validity(validity)
    valid = np.array(flags, dtype=bool)
    n = valid.size
    rows = np.arange(n)[:, None]
    cols = np.arange(n)[None, :]
    allowed = (cols <= rows) & (rows - cols < window) & valid[:, None] & valid[None, :]
    return AttentionMask(_pack(allowed), flags, MaskKind.SLIDING_CAUSAL, window)
