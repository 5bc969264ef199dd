"""
Generation head: KV-cache autoregressive decoding, the full-recompute oracle,
ANLS scoring and the single-model retrieve-then-answer path.
"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .backbone import Backbone, SequenceInput
from .exceptions import CacheError, ConfigError, InvalidInputError, SequenceLengthError
from .modeswitch import Mode, set_mode
from .tensorcore import Tensor, no_grad
from .vocab import EOS_ID

if TYPE_CHECKING:
    from .retrieval import Index

logger = logging.getLogger(__name__)


class KvCache:
    """
    Keys and values per layer ([heads, len, head_dim]) for one generate call.

    Every layer must hold exactly current_len positions between forward
    passes; a forward pass stores the extended arrays and advance() commits
    the new length.
    """

    def __init__(self, num_layers: int):
        self.keys: List[Optional[np.ndarray]] = [None] * num_layers
        self.values: List[Optional[np.ndarray]] = [None] * num_layers
        self.current_len = 0
        self.validity: Tuple[bool, ...] = ()

    def past(self, layer: int) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        keys = self.keys[layer]
        if keys is None:
            if self.current_len:
                raise CacheError(f"layer {layer} has no cached positions, expected {self.current_len}")
            return None, None
        if keys.shape[1] != self.current_len:
            raise CacheError(f"layer {layer} caches {keys.shape[1]} positions, expected {self.current_len}")
        return keys, self.values[layer]

    def store(self, layer: int, keys: np.ndarray, values: np.ndarray):
        self.keys[layer] = keys
        self.values[layer] = values

    def advance(self, new_validity: Sequence[bool]):
        new_len = self.current_len + len(new_validity)
        for layer, keys in enumerate(self.keys):
            if keys is None or keys.shape[1] != new_len:
                raise CacheError(f"layer {layer} was not extended to {new_len} positions")
        self.current_len = new_len
        self.validity = self.validity + tuple(bool(v) for v in new_validity)


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True)
class Sample:
    temperature: float = 0.7
    top_p: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("sampling temperature must be positive")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError("top_p must be in (0, 1]")


@dataclass(frozen=True)
class DecodeParams:
    max_new_tokens: int = 32
    strategy: Union[Greedy, Sample] = field(default_factory=Greedy)
    stop_token: int = EOS_ID

    def __post_init__(self):
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens cannot be negative")


def greedy_token(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest id on ties
    return int(np.argmax(logits))


def nucleus(logits: np.ndarray, temperature: float, top_p: float) -> Tuple[np.ndarray, np.ndarray]:
    """Token ids of the smallest top-probability prefix reaching top_p, and their renormalized mass."""
    scaled = logits.astype(np.float64) / temperature
    probs = np.exp(scaled - scaled.max())
    probs /= probs.sum()
    order = np.argsort(-probs, kind='stable')
    cumulative = np.cumsum(probs[order])
    cutoff = min(int(np.searchsorted(cumulative, top_p, side='left')) + 1, order.size)
    kept = probs[order[:cutoff]]
    return order[:cutoff], kept / kept.sum()


def sample_token(logits: np.ndarray, strategy: Sample, rng: np.random.Generator) -> int:
    ids, probs = nucleus(logits, strategy.temperature, strategy.top_p)
    draw = rng.random()
    position = int(np.searchsorted(np.cumsum(probs), draw, side='right'))
    return int(ids[min(position, ids.size - 1)])


class TokenChooser:
    """Applies the decode strategy; sampling owns a counter-based generator seeded per call."""

    def __init__(self, params: DecodeParams):
        self.strategy = params.strategy
        self.rng = None
        if isinstance(self.strategy, Sample):
            self.rng = np.random.Generator(np.random.Philox(self.strategy.seed))

    def __call__(self, logits: np.ndarray) -> int:
        if self.rng is None:
            return greedy_token(logits)
        return sample_token(logits, self.strategy, self.rng)


def _prepare(model: Backbone, prompt_tokens, patches, mode: Mode) -> SequenceInput:
    if mode not in (Mode.GENERATION, Mode.ADAPTED_GENERATION):
        raise InvalidInputError(f"generation cannot run in {mode.value} mode")
    prompt = SequenceInput(prompt_tokens, patches)
    if prompt.token_ids.size == 0:
        raise InvalidInputError("prompt must contain at least one token")
    if prompt.length > model.config.max_seq_len:
        raise SequenceLengthError(
            f"prompt of {prompt.length} positions exceeds max_seq_len {model.config.max_seq_len}")
    set_mode(model, mode)
    return prompt


def _last_logits(model: Backbone, hidden: Tensor) -> np.ndarray:
    return model.logits(Tensor(hidden.data[-1:])).data[0]


def generate(model: Backbone, prompt_tokens, patches: Optional[np.ndarray] = None,
             params: Optional[DecodeParams] = None, mode: Mode = Mode.GENERATION) -> List[int]:
    """
    Decode a continuation with a KV-cache.

    The prompt (patches first, then tokens) is processed once at prefill; each
    later step feeds only the newest token. The stop token ends decoding and is
    not returned. The cache lives only for this call.
    """
    params = params or DecodeParams()
    prompt = _prepare(model, prompt_tokens, patches, mode)
    if params.max_new_tokens == 0:
        return []

    choose = TokenChooser(params)
    cache = KvCache(len(model.layers))
    generated: List[int] = []
    with no_grad():
        logits = _last_logits(model, model.forward_hidden(prompt, cache=cache))
        while True:
            token = choose(logits)
            if token == params.stop_token:
                break
            generated.append(token)
            if len(generated) >= params.max_new_tokens or prompt.length + len(generated) >= model.config.max_seq_len:
                break
            hidden = model.forward_hidden(SequenceInput(np.array([token])), cache=cache)
            logits = _last_logits(model, hidden)
    return generated


def generate_nocache(model: Backbone, prompt_tokens, patches: Optional[np.ndarray] = None,
                     params: Optional[DecodeParams] = None, mode: Mode = Mode.GENERATION) -> List[int]:
    """Same contract as generate(), recomputing the whole sequence at every step."""
    params = params or DecodeParams()
    prompt = _prepare(model, prompt_tokens, patches, mode)
    if params.max_new_tokens == 0:
        return []

    choose = TokenChooser(params)
    generated: List[int] = []
    with no_grad():
        while True:
            sequence = SequenceInput(np.concatenate((prompt.token_ids, generated)).astype(np.int64), prompt.patches)
            token = choose(_last_logits(model, model.forward_hidden(sequence)))
            if token == params.stop_token:
                break
            generated.append(token)
            if len(generated) >= params.max_new_tokens or prompt.length + len(generated) >= model.config.max_seq_len:
                break
    return generated


# --------------------------------------------------------------------------- #
# ANLS
# --------------------------------------------------------------------------- #

def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, char_a in enumerate(a, start=1):
        current = [i]
        for j, char_b in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (char_a != char_b)))
        previous = current
    return previous[-1]


def anls(prediction: str, gold: Sequence[str], threshold: float = 0.5) -> float:
    """Best normalized Levenshtein similarity against any gold answer, zeroed below threshold."""
    if not gold:
        raise InvalidInputError("anls needs at least one gold answer")
    prediction = prediction.strip().lower()
    best = 0.0
    for answer in gold:
        answer = answer.strip().lower()
        longest = max(len(prediction), len(answer))
        similarity = 1.0 if longest == 0 else 1.0 - levenshtein(prediction, answer) / longest
        best = max(best, similarity if similarity >= threshold else 0.0)
    return best


def anls_summary(predictions: Sequence[str], golds: Sequence[Sequence[str]],
                 threshold: float = 0.5) -> Dict[str, float]:
    if len(predictions) != len(golds):
        raise InvalidInputError("predictions and gold lists differ in length")
    if not predictions:
        return {'n': 0, 'mean_anls': 0.0, 'exact_match_rate': 0.0}
    scores = [anls(p, g, threshold) for p, g in zip(predictions, golds)]
    exact = [any(p.strip().lower() == a.strip().lower() for a in g) for p, g in zip(predictions, golds)]
    return {
        'n': len(scores),
        'mean_anls': float(np.mean(scores)),
        'exact_match_rate': float(np.mean(exact)),
    }


# --------------------------------------------------------------------------- #
# Retrieve, then answer
# --------------------------------------------------------------------------- #

@dataclass
class AnswerResult:
    retrieved: List[Tuple[str, float]]
    tokens: List[int]

    @property
    def source_id(self) -> str:
        return self.retrieved[0][0]


def answer(model: Backbone, index: 'Index', pages: Mapping[str, np.ndarray], query_tokens,
           params: Optional[DecodeParams] = None, k: int = 1) -> AnswerResult:
    """
    Search the index in retrieval mode, then decode in generation mode
    conditioned on the top page's patches and the query.
    """
    from .retrieval import embed, search

    query = embed(model, SequenceInput(query_tokens), is_query=True)
    result = search(index, query, k)
    top_page = result.ranked[0][0]
    if top_page not in pages:
        raise InvalidInputError(f"no page content for retrieved document {top_page}")
    tokens = generate(model, query_tokens, pages[top_page], params)
    logger.debug("answered from %s with %d tokens", top_page, len(tokens))
    return AnswerResult(result.ranked, tokens)
