"""
Seeded synthetic corpus with known relevance.

Every content token owns a fixed prototype patch. A document page is a grid
of noisy prototypes for 8 distinct content tokens; its query is 4 of those
tokens. Query tokens therefore index the page's patch content, which is what
the retrieval head has to learn. Patch width follows the model's patch_dim
(PATCH_DIM unless a config says otherwise).
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Union

import numpy as np

from .backbone import SequenceInput
from .exceptions import FormatError, InvalidInputError
from .vocab import CONTENT_TOKEN_COUNT, EOS_ID, content_token_ids

logger = logging.getLogger(__name__)

DOC_TOKENS = 8
QUERY_TOKENS = 4
PATCH_DIM = 16
PATCH_NOISE = 0.05

# independent seed streams under one corpus seed
PROTOTYPE_STREAM = 0
TRAIN_STREAM = 1
HELD_OUT_STREAM = 2


@dataclass
class CorpusPair:
    doc_id: str
    query_tokens: np.ndarray
    doc_tokens: np.ndarray
    patches: np.ndarray

    def query_input(self) -> SequenceInput:
        return SequenceInput(self.query_tokens)

    def document_input(self) -> SequenceInput:
        return SequenceInput(np.zeros(0, dtype=np.int64), self.patches)

    def probe_input(self) -> SequenceInput:
        """Page plus the query as a prompt: one input that can be embedded and generated from."""
        return SequenceInput(self.query_tokens, self.patches)


@dataclass
class GenerationExample:
    """Prompt (page patches + query tokens) and the continuation to learn: the page's tokens then EOS."""

    patches: np.ndarray
    prompt: np.ndarray
    target: np.ndarray

    def training_tokens(self) -> np.ndarray:
        return np.concatenate((self.prompt, self.target)).astype(np.int64)


class SyntheticCorpus:
    MAGIC = b'HYCP'
    VERSION = 1
    _HEADER = struct.Struct('<4sIIIII')
    _U32 = struct.Struct('<I')

    def __init__(self, pairs: List[CorpusPair], seed: int):
        self.pairs = pairs
        self.seed = seed

    def __len__(self):
        return len(self.pairs)

    def __iter__(self) -> Iterator[CorpusPair]:
        return iter(self.pairs)

    def __getitem__(self, item):
        return self.pairs[item]

    def generation_examples(self) -> List[GenerationExample]:
        return [
            GenerationExample(pair.patches, pair.query_tokens,
                              np.concatenate((pair.doc_tokens, [EOS_ID])).astype(np.int64))
            for pair in self.pairs
        ]

    def save(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        query_len = len(self.pairs[0].query_tokens) if self.pairs else QUERY_TOKENS
        doc_len = len(self.pairs[0].doc_tokens) if self.pairs else DOC_TOKENS
        patch_dim = self.pairs[0].patches.shape[1] if self.pairs else PATCH_DIM
        with open(path, 'wb') as handle:
            handle.write(self._HEADER.pack(self.MAGIC, self.VERSION, len(self.pairs), query_len, doc_len, patch_dim))
            handle.write(self._U32.pack(self.seed))
            for pair in self.pairs:
                encoded = pair.doc_id.encode('utf-8')
                handle.write(self._U32.pack(len(encoded)))
                handle.write(encoded)
                handle.write(pair.query_tokens.astype('<u4').tobytes())
                handle.write(pair.doc_tokens.astype('<u4').tobytes())
                handle.write(pair.patches.astype('<f4').tobytes())
        logger.info("Wrote %d corpus pairs to %s", len(self.pairs), path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'SyntheticCorpus':
        payload = Path(path).read_bytes()
        if len(payload) < cls._HEADER.size + cls._U32.size:
            raise FormatError(f"{path}: truncated corpus header")
        magic, version, count, query_len, doc_len, patch_dim = cls._HEADER.unpack_from(payload, 0)
        if magic != cls.MAGIC:
            raise FormatError(f"{path}: not a corpus file")
        if version != cls.VERSION:
            raise FormatError(f"{path}: unsupported corpus version {version}")
        (seed,) = cls._U32.unpack_from(payload, cls._HEADER.size)
        offset = cls._HEADER.size + cls._U32.size

        def take(dtype, n):
            nonlocal offset
            size = np.dtype(dtype).itemsize * n
            if offset + size > len(payload):
                raise FormatError(f"{path}: truncated corpus record")
            values = np.frombuffer(payload, dtype=dtype, count=n, offset=offset)
            offset += size
            return values

        pairs = []
        for _ in range(count):
            (id_len,) = take('<u4', 1)
            doc_id = bytes(take('u1', int(id_len))).decode('utf-8')
            query = take('<u4', query_len).astype(np.int64)
            tokens = take('<u4', doc_len).astype(np.int64)
            patches = take('<f4', doc_len * patch_dim).reshape(doc_len, patch_dim).astype(np.float32)
            pairs.append(CorpusPair(doc_id, query, tokens, patches))
        if offset != len(payload):
            raise FormatError(f"{path}: trailing bytes after {count} records")
        return cls(pairs, seed)


def token_prototypes(seed: int, patch_dim: int = PATCH_DIM) -> np.ndarray:
    """[CONTENT_TOKEN_COUNT, patch_dim] unit-variance prototype patch per content token."""
    if patch_dim < 1:
        raise InvalidInputError("patch_dim must be positive")
    rng = np.random.default_rng([seed, PROTOTYPE_STREAM])
    return rng.normal(0.0, 1.0, (CONTENT_TOKEN_COUNT, patch_dim)).astype(np.float32)


def _draw_pairs(n_pairs: int, seed: int, stream: int, id_prefix: str, patch_dim: int) -> List[CorpusPair]:
    if n_pairs < 1:
        raise InvalidInputError("corpus needs at least one pair")
    prototypes = token_prototypes(seed, patch_dim)
    vocabulary = content_token_ids()
    rng = np.random.default_rng([seed, stream])
    pairs = []
    for i in range(n_pairs):
        slots = rng.choice(CONTENT_TOKEN_COUNT, size=DOC_TOKENS, replace=False)
        noise = rng.normal(0.0, PATCH_NOISE, (DOC_TOKENS, patch_dim))
        patches = (prototypes[slots] + noise).astype(np.float32)
        query_slots = rng.choice(DOC_TOKENS, size=QUERY_TOKENS, replace=False)
        pairs.append(CorpusPair(
            doc_id=f"{id_prefix}-{i:05d}",
            query_tokens=vocabulary[slots[query_slots]],
            doc_tokens=vocabulary[slots],
            patches=patches,
        ))
    return pairs


def generate_corpus(n_pairs: int = 2000, seed: int = 42, patch_dim: int = PATCH_DIM) -> SyntheticCorpus:
    return SyntheticCorpus(_draw_pairs(n_pairs, seed, TRAIN_STREAM, 'doc', patch_dim), seed)


def held_out_corpus(n_pairs: int = 200, seed: int = 42, patch_dim: int = PATCH_DIM) -> SyntheticCorpus:
    """Pairs from a seed stream training never sees (same token prototypes)."""
    return SyntheticCorpus(_draw_pairs(n_pairs, seed, HELD_OUT_STREAM, 'heldout', patch_dim), seed)
