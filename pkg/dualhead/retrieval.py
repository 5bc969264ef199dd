"""
Retrieval head: multi-vector embeddings, MaxSim late interaction, an
exhaustively scanned index, and ranking metrics.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .backbone import Backbone, SequenceInput
from .exceptions import (
    DimensionError, DuplicateDocumentError, EmptyIndexError, FormatError, InvalidInputError,
)
from .modeswitch import Mode, set_mode
from .tensorcore import Tensor, l2_normalize_rows, matmul, max_lastdim, no_grad, select_rows, sum_all, swap_last
from .vocab import DOC_MARKER_ID, PAD_ID, QUERY_MARKER_ID

logger = logging.getLogger(__name__)

UNIT_NORM_TOLERANCE = 1e-5


@dataclass
class MultiVecEmbedding:
    """Per-token unit vectors for one query or document."""

    vectors: np.ndarray
    source_id: Optional[str] = None

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise DimensionError(f"embedding must be [num_tokens >= 1, proj_dim], got {self.vectors.shape}")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if np.abs(norms - 1.0).max() > UNIT_NORM_TOLERANCE:
            raise DimensionError("embedding rows must be unit-norm")

    @property
    def num_tokens(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def _with_marker(inp: SequenceInput, marker: int) -> Tuple[SequenceInput, np.ndarray]:
    """Insert the marker token after the patches; return the new input and the positions kept for MaxSim."""
    if inp.length == 0:
        raise InvalidInputError("cannot embed an empty input")
    n_patches = inp.num_patches
    if inp.validity is not None:
        flags = list(inp.validity)
    else:
        flags = [True] * n_patches + [int(t) != PAD_ID for t in inp.token_ids]
    flags.insert(n_patches, True)

    sequence = SequenceInput(
        token_ids=np.concatenate(([marker], inp.token_ids)).astype(np.int64),
        patches=inp.patches,
        validity=flags,
    )
    keep = np.array([i for i, valid in enumerate(flags) if valid and i != n_patches], dtype=np.int64)
    if keep.size == 0:
        raise InvalidInputError("input has no valid positions to embed")
    return sequence, keep


def encode(model: Backbone, inp: SequenceInput, is_query: bool, training: bool = False,
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Differentiable embedding under the model's current mode.

    hidden states -> custom_text_proj -> row L2 normalization, with padding
    and the query/document marker dropped.
    """
    sequence, keep = _with_marker(inp, QUERY_MARKER_ID if is_query else DOC_MARKER_ID)
    hidden = model.forward_hidden(sequence, training=training, rng=rng)
    return l2_normalize_rows(model.project(select_rows(hidden, keep), training, rng))


def embed(model: Backbone, inp: SequenceInput, is_query: bool, source_id: Optional[str] = None) -> MultiVecEmbedding:
    set_mode(model, Mode.RETRIEVAL)
    with no_grad():
        vectors = encode(model, inp, is_query).data.copy()
    return MultiVecEmbedding(vectors, source_id)


def maxsim(q: MultiVecEmbedding, d: MultiVecEmbedding) -> float:
    """Sum over query rows of the best dot product against any document row."""
    if q.dim != d.dim:
        raise DimensionError(f"proj_dim mismatch: query {q.dim}, document {d.dim}")
    similarities = q.vectors.astype(np.float64) @ d.vectors.astype(np.float64).T
    return float(similarities.max(axis=1).sum())


def maxsim_tensor(q: Tensor, d: Tensor) -> Tensor:
    if q.shape[-1] != d.shape[-1]:
        raise DimensionError(f"proj_dim mismatch: query {q.shape}, document {d.shape}")
    return sum_all(max_lastdim(matmul(q, swap_last(d))))


@dataclass
class RetrievalResult:
    """Ranked (doc_id, score) pairs, best first."""

    ranked: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def doc_ids(self) -> List[str]:
        return [doc_id for doc_id, _ in self.ranked]

    @property
    def scores(self) -> List[float]:
        return [score for _, score in self.ranked]

    def __len__(self):
        return len(self.ranked)


class Index:
    """Insertion-ordered collection of document embeddings with unique ids."""

    MAGIC = b'HYIX'
    VERSION = 1
    _HEADER = struct.Struct('<4sIII')
    _U32 = struct.Struct('<I')

    def __init__(self, proj_dim: int):
        self.proj_dim = proj_dim
        self._entries: List[Tuple[str, MultiVecEmbedding]] = []
        self._positions: Dict[str, int] = {}

    def add(self, doc_id: str, embedding: MultiVecEmbedding):
        if doc_id in self._positions:
            raise DuplicateDocumentError(f"doc_id already indexed: {doc_id}")
        if embedding.dim != self.proj_dim:
            raise DimensionError(f"index holds {self.proj_dim}-dim vectors, got {embedding.dim}")
        self._positions[doc_id] = len(self._entries)
        self._entries.append((doc_id, embedding))

    def get(self, doc_id: str) -> MultiVecEmbedding:
        return self._entries[self._positions[doc_id]][1]

    def __len__(self):
        return len(self._entries)

    def __iter__(self) -> Iterator[Tuple[str, MultiVecEmbedding]]:
        return iter(self._entries)

    def __contains__(self, doc_id):
        return doc_id in self._positions

    @property
    def doc_ids(self) -> List[str]:
        return [doc_id for doc_id, _ in self._entries]

    def save(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as handle:
            handle.write(self._HEADER.pack(self.MAGIC, self.VERSION, self.proj_dim, len(self._entries)))
            for doc_id, embedding in self._entries:
                encoded = doc_id.encode('utf-8')
                handle.write(self._U32.pack(len(encoded)))
                handle.write(encoded)
                handle.write(self._U32.pack(embedding.num_tokens))
                handle.write(embedding.vectors.astype('<f4').tobytes())
        logger.info("Saved index with %d documents to %s", len(self._entries), path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Index':
        payload = Path(path).read_bytes()
        if len(payload) < cls._HEADER.size:
            raise FormatError(f"{path}: truncated index header")
        magic, version, proj_dim, count = cls._HEADER.unpack_from(payload, 0)
        if magic != cls.MAGIC:
            raise FormatError(f"{path}: not an index file")
        if version != cls.VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")

        index = cls(proj_dim)
        offset = cls._HEADER.size
        try:
            for _ in range(count):
                (id_len,) = cls._U32.unpack_from(payload, offset)
                offset += cls._U32.size
                doc_id = payload[offset:offset + id_len].decode('utf-8')
                offset += id_len
                (num_tokens,) = cls._U32.unpack_from(payload, offset)
                offset += cls._U32.size
                nbytes = num_tokens * proj_dim * 4
                if offset + nbytes > len(payload):
                    raise FormatError(f"{path}: truncated record for {doc_id}")
                vectors = np.frombuffer(payload, dtype='<f4', count=num_tokens * proj_dim, offset=offset)
                offset += nbytes
                index.add(doc_id, MultiVecEmbedding(vectors.reshape(num_tokens, proj_dim), doc_id))
        except struct.error as exc:
            raise FormatError(f"{path}: truncated index") from exc
        if offset != len(payload):
            raise FormatError(f"{path}: trailing bytes after {count} records")
        return index


def search(index: Index, q: MultiVecEmbedding, k: int) -> RetrievalResult:
    """Top-k documents by MaxSim; equal scores keep insertion order."""
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    if not len(index):
        raise EmptyIndexError("cannot search an empty index")
    scored = [(doc_id, maxsim(q, embedding)) for doc_id, embedding in index]
    order = sorted(range(len(scored)), key=lambda i: -scored[i][1])
    return RetrievalResult([scored[i] for i in order[:k]])


# --------------------------------------------------------------------------- #
# Ranking metrics (binary relevance)
# --------------------------------------------------------------------------- #

RankingLike = Union[RetrievalResult, Sequence[str]]


def _ranked_ids(ranked: RankingLike) -> List[str]:
    return ranked.doc_ids if isinstance(ranked, RetrievalResult) else list(ranked)


def ndcg_at_k(ranked: RankingLike, relevant: Iterable[str], k: int = 5) -> float:
    relevant = set(relevant)
    if not relevant:
        raise InvalidInputError("ndcg needs at least one relevant document")
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    ids = _ranked_ids(ranked)[:k]
    dcg = sum(1.0 / math.log2(rank + 2) for rank, doc_id in enumerate(ids) if doc_id in relevant)
    ideal = sum(1.0 / math.log2(rank + 2) for rank in range(min(k, len(relevant))))
    return dcg / ideal


def recall_at_k(ranked: RankingLike, relevant: Iterable[str], k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise InvalidInputError("recall needs at least one relevant document")
    hits = len(relevant.intersection(_ranked_ids(ranked)[:k]))
    return hits / len(relevant)


def reciprocal_rank(ranked: RankingLike, relevant: Iterable[str]) -> float:
    relevant = set(relevant)
    for rank, doc_id in enumerate(_ranked_ids(ranked), start=1):
        if doc_id in relevant:
            return 1.0 / rank
    return 0.0


def evaluate_rankings(results: Mapping[str, RankingLike], relevance: Mapping[str, Set[str]],
                      k: int = 5) -> Dict[str, float]:
    """Mean nDCG@k, Recall@1/5/10 and MRR over every query in relevance."""
    if not relevance:
        raise InvalidInputError("no queries to evaluate")
    totals = {f'ndcg@{k}': 0.0, 'recall@1': 0.0, 'recall@5': 0.0, 'recall@10': 0.0, 'mrr': 0.0}
    for query_id, relevant in relevance.items():
        ranked = results.get(query_id, [])
        totals[f'ndcg@{k}'] += ndcg_at_k(ranked, relevant, k)
        for cutoff in (1, 5, 10):
            totals[f'recall@{cutoff}'] += recall_at_k(ranked, relevant, cutoff)
        totals['mrr'] += reciprocal_rank(ranked, relevant)
    n = len(relevance)
    summary = {name: value / n for name, value in totals.items()}
    summary['n_queries'] = n
    return summary
