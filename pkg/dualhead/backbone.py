"""
The toy dual-head transformer.

One backbone, two heads:

- custom_text_proj (d -> proj_dim) feeds the multi-vector retrieval head
- lm_head (d -> vocab) feeds autoregressive generation

Layers follow a hybrid schedule of full-attention and sliding-window layers.
Every projection (q, k, v, o, gate, up, down) and custom_text_proj carries a
LoRA adapter kept as a parallel branch, never merged, so disabling it gives
the base model bit for bit. The patch featurizer standing in for the vision
encoder is frozen and has no adapter.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import CacheError, ConfigError, DimensionError, InvalidInputError, SequenceLengthError
from .masks import (
    AttentionMask, MaskKind, build_bidirectional_mask, build_causal_mask, build_sliding_causal_mask,
)
from .modeswitch import LayerModeState, Mode, set_mode
from .tensorcore import (
    Tensor, add, add_mask, concat, dropout, linear, matmul, mul, no_grad, parameter, permute,
    reshape, rmsnorm, rotary, scale, silu, softmax_lastdim, swap_last, take_rows,
)

if TYPE_CHECKING:
    from .generation import KvCache

logger = logging.getLogger(__name__)

FULL_ATTENTION = 'full'
SLIDING_WINDOW = 'sliding'

LORA_INIT_STD = 0.02
PROJECTION_TARGETS = ('q', 'k', 'v', 'o', 'gate', 'up', 'down')


@dataclass(frozen=True)
class LayerSpec:
    """One entry of the layer schedule: full attention or a sliding window."""

    kind: str
    window: Optional[int] = None

    @classmethod
    def parse(cls, text: str) -> 'LayerSpec':
        text = text.strip().lower()
        if text == FULL_ATTENTION:
            return cls(FULL_ATTENTION)
        if text.startswith(SLIDING_WINDOW + ':'):
            try:
                return cls(SLIDING_WINDOW, int(text.split(':', 1)[1]))
            except ValueError:
                pass
        raise ConfigError(f"bad layer schedule entry: {text!r} (expected 'full' or 'sliding:<window>')")

    @property
    def is_full(self) -> bool:
        return self.kind == FULL_ATTENTION

    def __str__(self):
        return FULL_ATTENTION if self.is_full else f"{SLIDING_WINDOW}:{self.window}"


def default_layer_schedule() -> Tuple[LayerSpec, ...]:
    return (LayerSpec(FULL_ATTENTION), LayerSpec(SLIDING_WINDOW, 8),
            LayerSpec(FULL_ATTENTION), LayerSpec(SLIDING_WINDOW, 8))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    hidden_dim: int = 64
    num_layers: int = 4
    layer_schedule: Tuple[LayerSpec, ...] = field(default_factory=default_layer_schedule)
    num_heads: int = 4
    ffn_dim: int = 128
    proj_dim: int = 32
    lora_rank: int = 16
    lora_alpha: int = 64
    lora_dropout: float = 0.197
    tie_lm_head_to_embedding: bool = False
    max_seq_len: int = 256
    patch_dim: int = 16
    rope_base: float = 10000.0
    rms_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        schedule = tuple(LayerSpec.parse(s) if isinstance(s, str) else s for s in self.layer_schedule)
        object.__setattr__(self, 'layer_schedule', schedule)

        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if (self.hidden_dim // self.num_heads) % 2:
            raise ConfigError("head dimension must be even for rotary position encoding")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be at least 1")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError("lora_dropout must be in [0, 1)")
        if len(schedule) != self.num_layers:
            raise ConfigError("layer_schedule length must equal num_layers")
        if not any(spec.is_full for spec in schedule):
            raise ConfigError("layer_schedule needs at least one full-attention layer")
        if any(not spec.is_full and (spec.window or 0) < 1 for spec in schedule):
            raise ConfigError("sliding-window layers need a window of at least 1")
        for name in ('vocab_size', 'hidden_dim', 'num_layers', 'num_heads', 'ffn_dim',
                     'proj_dim', 'max_seq_len', 'patch_dim'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_dict(self) -> dict:
        data = asdict(self)
        data['layer_schedule'] = [str(spec) for spec in self.layer_schedule]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ModelConfig':
        data = dict(data)
        data['layer_schedule'] = tuple(LayerSpec.parse(s) for s in data.get('layer_schedule', []))
        return cls(**data)


def count_trainable_params(config: ModelConfig) -> int:
    """Adapter parameter count: r * (in + out) per adapted projection, plus custom_text_proj."""
    r, d, f = config.lora_rank, config.hidden_dim, config.ffn_dim
    attention = 4 * r * (d + d)
    feed_forward = 2 * r * (d + f) + r * (f + d)
    return config.num_layers * (attention + feed_forward) + r * (d + config.proj_dim)


class LoraAdapter:
    """Low-rank pair (A, B); contributes scale * B @ (A @ x) when enabled."""

    def __init__(self, in_dim: int, out_dim: int, rank: int, alpha: int, dropout_p: float,
                 rng: np.random.Generator, name: str):
        self.A = parameter(rng.normal(0.0, LORA_INIT_STD, (rank, in_dim)), name=f"{name}.lora_A")
        self.B = parameter(np.zeros((out_dim, rank)), name=f"{name}.lora_B")
        self.scale = alpha / rank
        self.enabled = False
        self.dropout_p = dropout_p
        self.name = name

    def parameters(self) -> List[Tensor]:
        return [self.A, self.B]


def lora_linear_forward(x: Tensor, base_weight: Tensor, adapter: Optional[LoraAdapter],
                        training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    base_weight applied to x, plus the adapter branch when enabled (skipped, not subtracted, when off).

    Dropout on the adapter branch draws from rng, which is required whenever training is on.
    """
    out = linear(x, base_weight)
    if adapter is None or not adapter.enabled:
        return out
    branch_input = x
    if training and adapter.dropout_p > 0.0:
        if rng is None:
            raise InvalidInputError(f"{adapter.name}: training forward needs a seeded dropout rng")
        branch_input = dropout(x, adapter.dropout_p, rng)
    update = linear(linear(branch_input, adapter.A), adapter.B)
    return add(out, scale(update, adapter.scale))


class AdaptedLinear:
    """A frozen projection with an optional LoRA adapter beside it."""

    def __init__(self, weight: Tensor, adapter: Optional[LoraAdapter]):
        self.weight = weight
        self.adapter = adapter

    def __call__(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return lora_linear_forward(x, self.weight, self.adapter, training, rng)


class PatchFeaturizer:
    """Frozen stand-in for the vision encoder: a fixed linear map from flattened patches to d."""

    def __init__(self, weight: Tensor):
        self.weight = weight

    def __call__(self, patches: np.ndarray) -> Tensor:
        patches = np.asarray(patches, dtype=np.float32)
        if patches.ndim != 2 or patches.shape[1] != self.weight.shape[1]:
            raise DimensionError(f"patches must be [n, {self.weight.shape[1]}], got {patches.shape}")
        with no_grad():
            return linear(Tensor(patches), self.weight)


@dataclass
class SequenceInput:
    """Patches (if any) followed by token ids, with optional per-position validity."""

    token_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    patches: Optional[np.ndarray] = None
    validity: Optional[Sequence[bool]] = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64).reshape(-1)
        if self.patches is not None:
            self.patches = np.asarray(self.patches, dtype=np.float32)
            if self.patches.shape[0] == 0:
                self.patches = None
        if self.validity is not None:
            self.validity = tuple(bool(v) for v in self.validity)
            if len(self.validity) != self.length:
                raise DimensionError("validity must have one flag per position")

    @property
    def num_patches(self) -> int:
        return 0 if self.patches is None else int(self.patches.shape[0])

    @property
    def length(self) -> int:
        return self.num_patches + int(self.token_ids.size)

    def validity_flags(self) -> Tuple[bool, ...]:
        return self.validity if self.validity is not None else (True,) * self.length


class ForwardContext:
    """Masks, rotary tables and cache shared by all layers of one forward pass."""

    def __init__(self, config: ModelConfig, causal: AttentionMask, query_start: int,
                 cache: Optional['KvCache'], training: bool, rng: Optional[np.random.Generator]):
        self.causal = causal
        self.query_start = query_start
        self.cache = cache
        self.training = training
        self.rng = rng
        self._biases: Dict[tuple, np.ndarray] = {}

        positions = np.arange(query_start, causal.seq_len, dtype=np.float64)
        inv_freq = 1.0 / (config.rope_base ** (np.arange(0, config.head_dim, 2, dtype=np.float64) / config.head_dim))
        angles = np.outer(positions, inv_freq)
        angles = np.concatenate((angles, angles), axis=-1)
        self.cos = np.cos(angles).astype(np.float32)
        self.sin = np.sin(angles).astype(np.float32)

    def bias(self, kind: MaskKind, window: Optional[int] = None) -> np.ndarray:
        key = (kind, window)
        if key not in self._biases:
            if kind is MaskKind.CAUSAL:
                mask = self.causal
            elif kind is MaskKind.BIDIRECTIONAL:
                mask = build_bidirectional_mask(self.causal)
            else:
                mask = build_sliding_causal_mask(self.causal.validity, window)
            self._biases[key] = mask.usable_bias(self.query_start)
        return self._biases[key]


class Attention:
    """Multi-head self-attention with rotary positions and an optional KV-cache."""

    def __init__(self, layer_idx: int, spec: LayerSpec, config: ModelConfig,
                 q: AdaptedLinear, k: AdaptedLinear, v: AdaptedLinear, o: AdaptedLinear):
        self.layer_idx = layer_idx
        self.spec = spec
        self.num_heads = config.num_heads
        self.head_dim = config.head_dim
        self.q, self.k, self.v, self.o = q, k, v, o
        self.mode_state = LayerModeState(self.forward_causal, self.forward_bidirectional) if spec.is_full else None

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if self.mode_state is None:
            return self._attend(x, ctx.bias(MaskKind.SLIDING_CAUSAL, self.spec.window), ctx)
        return self.mode_state.forward(x, ctx)

    def forward_causal(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return self._attend(x, ctx.bias(MaskKind.CAUSAL), ctx)

    def forward_bidirectional(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return self._attend(x, ctx.bias(MaskKind.BIDIRECTIONAL), ctx)

    def _split_heads(self, x: Tensor) -> Tensor:
        seq = x.shape[0]
        return permute(reshape(x, (seq, self.num_heads, self.head_dim)), (1, 0, 2))

    def _attend(self, x: Tensor, bias: np.ndarray, ctx: ForwardContext) -> Tensor:
        seq = x.shape[0]
        q = rotary(self._split_heads(self.q(x, ctx.training, ctx.rng)), ctx.cos, ctx.sin)
        k = rotary(self._split_heads(self.k(x, ctx.training, ctx.rng)), ctx.cos, ctx.sin)
        v = self._split_heads(self.v(x, ctx.training, ctx.rng))

        if ctx.cache is not None:
            past_k, past_v = ctx.cache.past(self.layer_idx)
            if past_k is not None:
                k = concat([Tensor(past_k), k], axis=1)
                v = concat([Tensor(past_v), v], axis=1)
            ctx.cache.store(self.layer_idx, k.data, v.data)

        scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(self.head_dim))
        weights = softmax_lastdim(add_mask(scores, bias))
        context = matmul(weights, v)
        merged = reshape(permute(context, (1, 0, 2)), (seq, self.num_heads * self.head_dim))
        return self.o(merged, ctx.training, ctx.rng)


class FeedForward:
    """SwiGLU block: down(silu(gate(x)) * up(x))."""

    def __init__(self, gate: AdaptedLinear, up: AdaptedLinear, down: AdaptedLinear):
        self.gate, self.up, self.down = gate, up, down

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        hidden = mul(silu(self.gate(x, ctx.training, ctx.rng)), self.up(x, ctx.training, ctx.rng))
        return self.down(hidden, ctx.training, ctx.rng)


class DecoderLayer:
    def __init__(self, attention: Attention, feed_forward: FeedForward,
                 input_norm: Tensor, post_norm: Tensor, eps: float):
        self.attention = attention
        self.feed_forward = feed_forward
        self.input_norm = input_norm
        self.post_norm = post_norm
        self.eps = eps

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        x = add(x, self.attention(rmsnorm(x, self.input_norm, self.eps), ctx))
        return add(x, self.feed_forward(rmsnorm(x, self.post_norm, self.eps), ctx))


class Backbone:
    """
    Shared transformer with a retrieval head and a generation head.

    Base weights (including lm_head) are created frozen; adapter tensors are
    the only ones that require grad. A backbone built with with_adapters=False
    is the pristine base model the equivalence checks compare against.
    """

    def __init__(self, config: ModelConfig, with_adapters: bool = True):
        self.config = config
        self.with_adapters = with_adapters
        self.mode: Optional[Mode] = None
        self._forward_depth = 0

        base_rng = np.random.default_rng([config.seed, 0])
        adapter_rng = np.random.default_rng([config.seed, 1])
        d, f, r = config.hidden_dim, config.ffn_dim, config.lora_rank

        def frozen(shape, std, name):
            return parameter(base_rng.normal(0.0, std, shape), name=name, requires_grad=False)

        def projection(in_dim, out_dim, name):
            weight = frozen((out_dim, in_dim), 1.0 / math.sqrt(in_dim), f"{name}.weight")
            adapter = None
            if with_adapters:
                adapter = LoraAdapter(in_dim, out_dim, r, config.lora_alpha, config.lora_dropout,
                                      adapter_rng, name)
            return AdaptedLinear(weight, adapter)

        self.embedding = frozen((config.vocab_size, d), 1.0, 'embed_tokens.weight')
        self.featurizer = PatchFeaturizer(
            frozen((d, config.patch_dim), 1.0 / math.sqrt(config.patch_dim), 'featurizer.weight'))

        self.layers: List[DecoderLayer] = []
        for idx, spec in enumerate(config.layer_schedule):
            prefix = f"layers.{idx}"
            attention = Attention(
                idx, spec, config,
                projection(d, d, f"{prefix}.q_proj"),
                projection(d, d, f"{prefix}.k_proj"),
                projection(d, d, f"{prefix}.v_proj"),
                projection(d, d, f"{prefix}.o_proj"),
            )
            feed_forward = FeedForward(
                projection(d, f, f"{prefix}.gate_proj"),
                projection(d, f, f"{prefix}.up_proj"),
                projection(f, d, f"{prefix}.down_proj"),
            )
            self.layers.append(DecoderLayer(
                attention, feed_forward,
                parameter(np.ones(d), name=f"{prefix}.input_norm", requires_grad=False),
                parameter(np.ones(d), name=f"{prefix}.post_norm", requires_grad=False),
                config.rms_eps,
            ))

        self.final_norm = parameter(np.ones(d), name='final_norm', requires_grad=False)
        self.custom_text_proj = projection(d, config.proj_dim, 'custom_text_proj')
        self.lm_head = frozen((config.vocab_size, d), 1.0 / math.sqrt(d), 'lm_head.weight')
        if config.tie_lm_head_to_embedding:
            self.tie_lm_head()

        set_mode(self, Mode.GENERATION)

    # ------------------------------------------------------------------ #
    # Parameter bookkeeping
    # ------------------------------------------------------------------ #

    def _projections(self) -> Iterator[Tuple[str, AdaptedLinear]]:
        for idx, layer in enumerate(self.layers):
            attention, feed_forward = layer.attention, layer.feed_forward
            for target, proj in zip(PROJECTION_TARGETS, (attention.q, attention.k, attention.v, attention.o,
                                                         feed_forward.gate, feed_forward.up, feed_forward.down)):
                yield f"layers.{idx}.{target}_proj", proj
        yield 'custom_text_proj', self.custom_text_proj

    def adapters(self) -> List[LoraAdapter]:
        return [proj.adapter for _, proj in self._projections() if proj.adapter is not None]

    def full_attention_states(self) -> List[LayerModeState]:
        return [layer.attention.mode_state for layer in self.layers if layer.attention.mode_state is not None]

    @property
    def lm_head_is_tied(self) -> bool:
        return self.lm_head is self.embedding

    def tie_lm_head(self):
        """Share one tensor between the input embedding and lm_head."""
        self.lm_head = self.embedding

    def named_base_parameters(self) -> List[Tuple[str, Tensor]]:
        """Every frozen backbone tensor except lm_head."""
        named = [('embed_tokens.weight', self.embedding), ('featurizer.weight', self.featurizer.weight)]
        for idx, layer in enumerate(self.layers):
            named.append((f"layers.{idx}.input_norm", layer.input_norm))
            named.append((f"layers.{idx}.post_norm", layer.post_norm))
        named.extend((f"{name}.weight", proj.weight) for name, proj in self._projections())
        named.append(('final_norm', self.final_norm))
        return named

    def named_adapter_parameters(self) -> List[Tuple[str, Tensor]]:
        named = []
        for adapter in self.adapters():
            named.append((f"{adapter.name}.lora_A", adapter.A))
            named.append((f"{adapter.name}.lora_B", adapter.B))
        return named

    def all_parameters(self) -> List[Tensor]:
        """Unique tensors of the model (a tied lm_head is counted once)."""
        seen, unique = set(), []
        tensors = [t for _, t in self.named_base_parameters()] + [self.lm_head]
        tensors += [t for _, t in self.named_adapter_parameters()]
        for tensor in tensors:
            if id(tensor) not in seen:
                seen.add(id(tensor))
                unique.append(tensor)
        return unique

    def trainable_parameters(self) -> List[Tensor]:
        return [t for t in self.all_parameters() if t.requires_grad]

    def count_trainable_tensors(self) -> int:
        """Enumeration counterpart of count_trainable_params."""
        return sum(t.size for t in self.trainable_parameters())

    def count_total_params(self) -> int:
        return sum(t.size for t in self.all_parameters())

    def freeze_base(self):
        """Base weights and lm_head frozen, adapters trainable."""
        for _, tensor in self.named_base_parameters():
            tensor.requires_grad = False
        self.lm_head.requires_grad = False
        for _, tensor in self.named_adapter_parameters():
            tensor.requires_grad = True

    def zero_grad(self):
        for tensor in self.all_parameters():
            tensor.grad = None

    def clone_base(self) -> 'Backbone':
        """An adapter-free copy of this model's base weights and lm_head."""
        pristine = Backbone(self.config, with_adapters=False)
        for (_, source), (_, target) in zip(self.named_base_parameters(), pristine.named_base_parameters()):
            target.data = source.data.copy()
        if not pristine.lm_head_is_tied:
            pristine.lm_head.data = self.lm_head.data.copy()
        return pristine

    # ------------------------------------------------------------------ #
    # Forward
    # ------------------------------------------------------------------ #

    @property
    def forward_in_flight(self) -> bool:
        return self._forward_depth > 0

    def embed_inputs(self, inp: SequenceInput) -> Tensor:
        parts = []
        if inp.patches is not None:
            parts.append(self.featurizer(inp.patches))
        if inp.token_ids.size:
            parts.append(take_rows(self.embedding, inp.token_ids))
        if not parts:
            raise DimensionError("input has neither patches nor tokens")
        return concat(parts, axis=0)

    def forward_hidden(self, inp: SequenceInput, mask: Optional[AttentionMask] = None,
                       cache: Optional['KvCache'] = None, training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> Tensor:
        """
        Hidden states [new_positions, d] after the final norm.

        Full-attention layers follow their mode selector; sliding-window layers
        always use a windowed causal mask. With a cache, only the new positions
        are computed and the cache grows by their count.
        """
        past = 0
        past_validity: Tuple[bool, ...] = ()
        if cache is not None:
            past = cache.current_len
            past_validity = cache.validity
            if len(past_validity) != past:
                raise CacheError("cache validity does not match its length")

        total = past + inp.length
        if total > self.config.max_seq_len:
            raise SequenceLengthError(f"sequence of {total} positions exceeds max_seq_len {self.config.max_seq_len}")

        if mask is None:
            mask = build_causal_mask(past_validity + inp.validity_flags())
        if mask.kind is not MaskKind.CAUSAL:
            raise DimensionError("forward_hidden takes the causal mask; mode selectors derive the rest")
        if mask.seq_len != total:
            raise CacheError(f"mask covers {mask.seq_len} positions, sequence has {total}")

        ctx = ForwardContext(self.config, mask, past, cache, training, rng)
        self._forward_depth += 1
        try:
            x = self.embed_inputs(inp)
            for layer in self.layers:
                x = layer(x, ctx)
            hidden = rmsnorm(x, self.final_norm, self.config.rms_eps)
        finally:
            self._forward_depth -= 1

        if cache is not None:
            cache.advance(inp.validity_flags())
        return hidden

    def logits(self, hidden: Tensor) -> Tensor:
        return linear(hidden, self.lm_head)

    def project(self, hidden: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.custom_text_proj(hidden, training, rng)
