"""
Byte-level toy vocabulary.

Every id is a byte. Ids 0-3 are reserved control tokens; the synthetic
corpus draws its content tokens from a fixed band above them.
"""

from typing import Iterable, List

import numpy as np

PAD_ID = 0
QUERY_MARKER_ID = 1
DOC_MARKER_ID = 2
EOS_ID = 3

RESERVED_IDS = frozenset({PAD_ID, QUERY_MARKER_ID, DOC_MARKER_ID, EOS_ID})

CONTENT_TOKEN_START = 16
CONTENT_TOKEN_COUNT = 64


def content_token_ids() -> np.ndarray:
    return np.arange(CONTENT_TOKEN_START, CONTENT_TOKEN_START + CONTENT_TOKEN_COUNT, dtype=np.int64)


def encode_text(text: str) -> List[int]:
    return list(text.encode('latin-1', errors='replace'))


def decode_tokens(token_ids: Iterable[int]) -> str:
    """Bytes back to text; reserved control ids are skipped."""
    return bytes(int(t) for t in token_ids if int(t) not in RESERVED_IDS and 0 <= int(t) < 256).decode('latin-1')
