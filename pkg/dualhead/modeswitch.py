"""
Per-call switching between the retrieval head and the generation head.

Retrieval mode enables every LoRA adapter and patches the full-attention
layers to bidirectional attention. Generation mode disables the adapters and
restores causal attention. Sliding-window layers are never touched, and no
weight is copied or reloaded on a switch.
"""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Union

import numpy as np

from .exceptions import IntegrityError, ModeSwitchError
from .tensorcore import tensor_digest

if TYPE_CHECKING:
    from .backbone import Backbone, SequenceInput
    from .generation import DecodeParams

logger = logging.getLogger(__name__)


class Mode(Enum):
    RETRIEVAL = "retrieval"
    GENERATION = "generation"
    # adapters on with causal attention: the mode joint training targets
    ADAPTED_GENERATION = "adapted_generation"


class AttentionPath(Enum):
    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"


class LayerModeState:
    """Both forward paths of one full-attention layer and the one currently live."""

    def __init__(self, causal_path: Callable, bidirectional_path: Callable):
        self.causal_path = causal_path
        self.bidirectional_path = bidirectional_path
        self.active = AttentionPath.CAUSAL

    @property
    def forward(self) -> Callable:
        if self.active is AttentionPath.BIDIRECTIONAL:
            return self.bidirectional_path
        return self.causal_path


def enable_adapters(model: 'Backbone'):
    for adapter in model.adapters():
        adapter.enabled = True


def disable_adapters(model: 'Backbone'):
    for adapter in model.adapters():
        adapter.enabled = False


def patch_bidirectional_attention(model: 'Backbone'):
    for state in model.full_attention_states():
        state.active = AttentionPath.BIDIRECTIONAL


def restore_causal_attention(model: 'Backbone'):
    for state in model.full_attention_states():
        state.active = AttentionPath.CAUSAL


def set_mode(model: 'Backbone', mode: Mode):
    """Put adapters and full-attention selectors in the state `mode` requires. Idempotent."""
    if model.forward_in_flight:
        raise ModeSwitchError("cannot switch mode while a forward pass is in flight")

    if mode is Mode.RETRIEVAL:
        enable_adapters(model)
        patch_bidirectional_attention(model)
    elif mode is Mode.GENERATION:
        disable_adapters(model)
        restore_causal_attention(model)
    elif mode is Mode.ADAPTED_GENERATION:
        enable_adapters(model)
        restore_causal_attention(model)
    else:
        raise ModeSwitchError(f"unknown mode: {mode!r}")

    if model.mode is not mode:
        logger.debug("mode switch %s -> %s", model.mode.value if model.mode else None, mode.value)
    model.mode = mode


def mode_state(model: 'Backbone') -> tuple:
    """Everything set_mode may touch, as a comparable value."""
    return (
        model.mode,
        tuple(adapter.enabled for adapter in model.adapters()),
        tuple(state.active for state in model.full_attention_states()),
    )


def mode_invariant_holds(model: 'Backbone') -> bool:
    expected_adapters = model.mode in (Mode.RETRIEVAL, Mode.ADAPTED_GENERATION)
    expected_path = AttentionPath.BIDIRECTIONAL if model.mode is Mode.RETRIEVAL else AttentionPath.CAUSAL
    return (all(adapter.enabled == expected_adapters for adapter in model.adapters())
            and all(state.active is expected_path for state in model.full_attention_states()))


def _normalize_digest(digest: Union[bytes, str, None]) -> str:
    if not digest:
        raise IntegrityError("no reference digest for lm_head")
    if isinstance(digest, bytes):
        if len(digest) == 32:
            return digest.hex()
        digest = digest.decode('ascii')
    return digest.strip().lower()


def verify_lm_head(model: 'Backbone', reference_digest: Union[bytes, str, None]) -> bool:
    """True iff the current lm_head bytes hash to reference_digest."""
    expected = _normalize_digest(reference_digest)
    current = tensor_digest(model.lm_head)
    if current != expected:
        logger.warning("lm_head digest mismatch: expected %s, found %s", expected[:12], current[:12])
        return False
    return True


def time_mode_roundtrips(model: 'Backbone', iterations: int = 50) -> List[float]:
    """Seconds per Retrieval -> Generation -> Retrieval round trip."""
    timings = []
    for _ in range(iterations):
        started = time.perf_counter()
        set_mode(model, Mode.RETRIEVAL)
        set_mode(model, Mode.GENERATION)
        set_mode(model, Mode.RETRIEVAL)
        timings.append(time.perf_counter() - started)
    return timings


@dataclass
class RoundtripReport:
    """Outcome of alternating embed/generate cycles against single-pass references."""

    n_inputs: int
    cycles: int
    max_embedding_diff: float
    min_cosine_similarity: float
    generation_identical_fraction: float
    records: List[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_embedding_diff == 0.0 and self.generation_identical_fraction == 1.0


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).reshape(-1)
    b = b.astype(np.float64).reshape(-1)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def mode_roundtrip_check(model: 'Backbone', inputs: Sequence['SequenceInput'],
                         params: Optional['DecodeParams'] = None, cycles: int = 2,
                         embed_fn: Optional[Callable] = None,
                         generate_fn: Optional[Callable] = None) -> RoundtripReport:
    """
    Contamination protocol: embed -> generate -> embed -> generate per input.

    Every round-trip output is compared with the output of a single pass
    (all embeddings first, then all generations).
    """
    from .generation import DecodeParams, generate
    from .retrieval import embed

    if not inputs:
        raise ValueError("mode_roundtrip_check needs at least one input")
    params = params or DecodeParams(max_new_tokens=8)
    embed_fn = embed_fn or (lambda m, item: embed(m, item, is_query=False))
    generate_fn = generate_fn or (lambda m, item, p: generate(m, item.token_ids, item.patches, p))

    reference_embeddings = [embed_fn(model, item).vectors for item in inputs]
    reference_generations = [generate_fn(model, item, params) for item in inputs]

    max_diff = 0.0
    min_cosine = 1.0
    identical = 0
    total = 0
    records = []
    for index, item in enumerate(inputs):
        for cycle in range(cycles):
            vectors = embed_fn(model, item).vectors
            tokens = generate_fn(model, item, params)
            if vectors.shape == reference_embeddings[index].shape:
                diff = float(np.max(np.abs(vectors - reference_embeddings[index])))
                cosine = _cosine(vectors, reference_embeddings[index])
            else:
                diff, cosine = float('inf'), 0.0
            same = list(tokens) == list(reference_generations[index])
            max_diff = max(max_diff, diff)
            min_cosine = min(min_cosine, cosine)
            identical += int(same)
            total += 1
            records.append({
                'input': index,
                'cycle': cycle,
                'embedding_max_diff': diff,
                'cosine_similarity': cosine,
                'generation_identical': same,
            })

    report = RoundtripReport(
        n_inputs=len(inputs),
        cycles=cycles,
        max_embedding_diff=max_diff,
        min_cosine_similarity=min_cosine,
        generation_identical_fraction=identical / total,
        records=records,
    )
    if not report.passed:
        logger.warning("mode round trip leaked state: max diff %.3g, identical %.1f%%",
                       max_diff, 100.0 * report.generation_identical_fraction)
    return report
