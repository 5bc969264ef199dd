"""
Adapter training for the retrieval head, and the joint-training ablation.

Retrieval-only training optimizes the LoRA adapters (and custom_text_proj's
adapter) with an in-batch-negative late-interaction loss. Base weights and
lm_head stay frozen; two fault flags deliberately break that to show the
lm_head digest check firing.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .backbone import Backbone, SequenceInput
from .corpus import CorpusPair, GenerationExample, SyntheticCorpus
from .exceptions import ConfigError, InvalidInputError, NonFiniteError, TrainingDivergedError
from .modeswitch import Mode, set_mode
from .retrieval import MultiVecEmbedding, encode, maxsim_tensor
from .tensorcore import (
    Tensor, concat, cross_entropy, linear, matmul, max_lastdim, permute, reshape, scale,
    select_rows, stack, sum_lastdim, swap_last, tensor_digest,
)

logger = logging.getLogger(__name__)


class TrainingMode(Enum):
    RETRIEVAL_ONLY = "retrieval_only"
    JOINT = "joint"


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.02
    lr: float = 5e-5
    warmup_frac: float = 0.08
    epochs: int = 1
    batch_size: int = 16
    grad_accum_steps: int = 1
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    mode: TrainingMode = TrainingMode.RETRIEVAL_ONLY
    gen_frac: float = 0.2
    max_steps: Optional[int] = None
    fault_tied_lm_head: bool = False
    fault_unfrozen_lm_head: bool = False
    spurious_grad_accumulation: bool = False
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if not 0.0 < self.gen_frac < 1.0:
            raise ConfigError("gen_frac must be in (0, 1)")
        if self.batch_size < 1 or self.grad_accum_steps < 1 or self.epochs < 1:
            raise ConfigError("batch_size, grad_accum_steps and epochs must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive when set")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay cannot be negative")

    def to_dict(self) -> dict:
        return {
            'temperature': self.temperature, 'lr': self.lr, 'warmup_frac': self.warmup_frac,
            'epochs': self.epochs, 'batch_size': self.batch_size, 'grad_accum_steps': self.grad_accum_steps,
            'weight_decay': self.weight_decay, 'betas': list(self.betas), 'adam_eps': self.adam_eps,
            'mode': self.mode.value, 'gen_frac': self.gen_frac, 'max_steps': self.max_steps,
            'fault_tied_lm_head': self.fault_tied_lm_head, 'fault_unfrozen_lm_head': self.fault_unfrozen_lm_head,
            'spurious_grad_accumulation': self.spurious_grad_accumulation, 'log_every': self.log_every,
            'seed': self.seed,
        }


@dataclass
class TrainReport:
    losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    base_checksum_delta: int = 0
    lm_head_digest_match: bool = True
    lm_head_digest_before: str = ''
    lm_head_digest_after: str = ''
    trainable_params: int = 0
    steps: int = 0
    generation_steps: int = 0

    def to_dict(self) -> dict:
        return {
            'steps': self.steps,
            'generation_steps': self.generation_steps,
            'final_loss': self.losses[-1] if self.losses else None,
            'base_checksum_delta': self.base_checksum_delta,
            'lm_head_digest_match': self.lm_head_digest_match,
            'lm_head_digest': self.lm_head_digest_after,
            'trainable_params': self.trainable_params,
        }


# --------------------------------------------------------------------------- #
# Loss and schedule
# --------------------------------------------------------------------------- #

def _as_tensor(embedding: Union[Tensor, MultiVecEmbedding]) -> Tensor:
    return embedding if isinstance(embedding, Tensor) else Tensor(embedding.vectors)


def score_matrix(queries: Sequence[Tensor], docs: Sequence[Tensor]) -> Tensor:
    """[n_queries, n_docs] MaxSim scores, differentiable in every embedding."""
    n_q, n_d = len(queries), len(docs)
    q_lens = {q.shape[0] for q in queries}
    d_lens = {d.shape[0] for d in docs}
    if len(q_lens) == 1 and len(d_lens) == 1:
        lq, ld = q_lens.pop(), d_lens.pop()
        similarities = matmul(concat(list(queries), axis=0), swap_last(concat(list(docs), axis=0)))
        best = max_lastdim(reshape(similarities, (n_q, lq, n_d, ld)))
        return sum_lastdim(permute(best, (0, 2, 1)))
    rows = [stack([maxsim_tensor(q, d) for d in docs]) for q in queries]
    return stack(rows)


def colbert_loss(query_embs: Sequence[Union[Tensor, MultiVecEmbedding]],
                 doc_embs: Sequence[Union[Tensor, MultiVecEmbedding]], temperature: float) -> Tensor:
    """In-batch-negative cross-entropy over MaxSim / temperature; doc i is the positive for query i."""
    if not query_embs:
        raise InvalidInputError("colbert_loss needs at least one pair")
    if len(query_embs) != len(doc_embs):
        raise InvalidInputError("query and document batches differ in size")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    scores = score_matrix([_as_tensor(q) for q in query_embs], [_as_tensor(d) for d in doc_embs])
    return cross_entropy(scale(scores, 1.0 / temperature), np.arange(len(query_embs)))


def warmup_steps(total: int, cfg: TrainConfig) -> int:
    return math.ceil(Fraction(str(cfg.warmup_frac)) * total)


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """
    Linear warmup from 0 to cfg.lr, then cosine decay to 0 at step == total.

    With warmup_frac 0 there is no warmup step, so step 0 already runs at the full cfg.lr.
    """
    if not 0 <= step <= total:
        raise InvalidInputError(f"step {step} outside [0, {total}]")
    warmup = warmup_steps(total, cfg)
    if step < warmup:
        return cfg.lr * step / warmup
    if total == warmup:
        return cfg.lr
    progress = (step - warmup) / (total - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def is_generation_step(step: int, gen_frac: float) -> bool:
    """Deterministic interleave: exactly floor(n * gen_frac) generation steps among the first n."""
    fraction = Fraction(str(gen_frac))
    return math.floor((step + 1) * fraction) > math.floor(step * fraction)


# --------------------------------------------------------------------------- #
# Optimizer and gradient sync
# --------------------------------------------------------------------------- #

class AdamW:
    """Adam with decoupled weight decay, updating parameter arrays in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-5, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.exp_avg, self.exp_avg_sq):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            p.data -= (lr * update).astype(p.data.dtype)

    def grad_norm(self) -> float:
        total = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.params if p.grad is not None)
        return math.sqrt(total)


def round_to_bfloat16(values: np.ndarray) -> np.ndarray:
    """Round float32 values to the nearest bfloat16 (ties to even), returned as float32."""
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) & 0xFFFF0000
    return rounded.astype(np.uint32).view(np.float32)


class GradientBucketSync:
    """
    Single-process model of a data-parallel gradient bucket.

    Every requires_grad tensor is bucketed, whether or not an optimizer owns
    it. With spurious accumulation on, each sync materializes a gradient
    buffer for every bucket member, reduces it in bfloat16, and broadcasts the
    bucket's parameters back through bfloat16 as well.
    """

    def __init__(self, tensors: Sequence[Tensor], spurious_accumulation: bool = False):
        self.bucket = [t for t in tensors if t.requires_grad]
        self.spurious_accumulation = spurious_accumulation

    def sync(self):
        if not self.spurious_accumulation:
            return
        for tensor in self.bucket:
            grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            tensor.grad = round_to_bfloat16(grad)
            tensor.data[...] = round_to_bfloat16(tensor.data)


# --------------------------------------------------------------------------- #
# Batch losses
# --------------------------------------------------------------------------- #

def batch_loss(model: Backbone, pairs: Sequence[CorpusPair], cfg: TrainConfig,
               rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
    """
    Retrieval batch: adapters on, bidirectional full attention.

    Evaluation by default; training=True turns on adapter dropout and then needs rng.
    """
    set_mode(model, Mode.RETRIEVAL)
    queries = [encode(model, pair.query_input(), True, training, rng) for pair in pairs]
    docs = [encode(model, pair.document_input(), False, training, rng) for pair in pairs]
    return colbert_loss(queries, docs, cfg.temperature)


def generation_batch_loss(model: Backbone, examples: Sequence[GenerationExample],
                          rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
    """
    Next-token cross-entropy over each example's target, adapters on with causal attention.

    lm_head stays frozen, so gradients pass through it without accumulating on it.
    """
    if not examples:
        raise InvalidInputError("generation batch is empty")
    set_mode(model, Mode.ADAPTED_GENERATION)
    logits, targets = [], []
    for example in examples:
        tokens = example.training_tokens()
        sequence = SequenceInput(tokens, example.patches)
        hidden = model.forward_hidden(sequence, training=training, rng=rng)
        offset = sequence.num_patches + len(example.prompt) - 1
        rows = np.arange(offset, offset + len(example.target))
        logits.append(linear(select_rows(hidden, rows), model.lm_head))
        targets.append(example.target)
    return cross_entropy(concat(logits, axis=0), np.concatenate(targets))


# --------------------------------------------------------------------------- #
# Training loops
# --------------------------------------------------------------------------- #

def apply_fault_flags(model: Backbone, cfg: TrainConfig) -> List[Tensor]:
    """
    Freeze the base, apply any fault flags, and return the tensors the optimizer owns.

    The requires_grad changes last only for the run: training calls freeze_base() on the way out.
    A tied lm_head stays tied afterwards.
    """
    model.freeze_base()
    owned = [t for _, t in model.named_adapter_parameters()]
    if cfg.fault_tied_lm_head:
        # shared storage: a trainable input embedding that is also lm_head
        model.tie_lm_head()
        model.embedding.requires_grad = True
        owned.append(model.embedding)
        logger.warning("fault injection: lm_head tied to a trainable embedding")
    if cfg.fault_unfrozen_lm_head:
        model.lm_head.requires_grad = True
        logger.warning("fault injection: lm_head left requires_grad=True")
    return owned


def _batches(n: int, batch_size: int, seed: int, stream: int) -> Iterator[np.ndarray]:
    epoch = 0
    while True:
        order = np.random.default_rng([seed, stream, epoch]).permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]
        epoch += 1


def total_steps(n_pairs: int, cfg: TrainConfig) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    per_epoch = math.ceil(n_pairs / (cfg.batch_size * cfg.grad_accum_steps))
    return cfg.epochs * per_epoch


def _base_digests(model: Backbone) -> Dict[str, str]:
    return {name: tensor_digest(tensor) for name, tensor in model.named_base_parameters()}


def _run(model: Backbone, corpus: SyntheticCorpus, gen_examples: Optional[Sequence[GenerationExample]],
         cfg: TrainConfig) -> TrainReport:
    if not len(corpus):
        raise InvalidInputError("training corpus is empty")

    owned = apply_fault_flags(model, cfg)
    try:
        return _steps(model, corpus, gen_examples, cfg, owned)
    finally:
        model.freeze_base()


def _steps(model: Backbone, corpus: SyntheticCorpus, gen_examples: Optional[Sequence[GenerationExample]],
           cfg: TrainConfig, owned: List[Tensor]) -> TrainReport:
    base_before = _base_digests(model)
    lm_head_before = tensor_digest(model.lm_head)
    optimizer = AdamW(owned, cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    bucket = GradientBucketSync(model.trainable_parameters(), cfg.spurious_grad_accumulation)

    steps = total_steps(len(corpus), cfg)
    retrieval_batches = _batches(len(corpus), cfg.batch_size, cfg.seed, 0)
    generation_batches = _batches(len(gen_examples), cfg.batch_size, cfg.seed, 1) if gen_examples else None
    dropout_rng = np.random.default_rng([cfg.seed, 2])

    report = TrainReport(trainable_params=sum(t.size for t in owned), lm_head_digest_before=lm_head_before)
    logger.info("Training %d steps (%s), %d trainable parameters", steps, cfg.mode.value, report.trainable_params)

    for step in range(steps):
        lr = lr_at(step, steps, cfg)
        generation_step = generation_batches is not None and is_generation_step(step, cfg.gen_frac)
        model.zero_grad()
        step_loss = 0.0
        try:
            for _ in range(cfg.grad_accum_steps):
                if generation_step:
                    batch = [gen_examples[i] for i in next(generation_batches)]
                    loss = generation_batch_loss(model, batch, dropout_rng, training=True)
                else:
                    batch = [corpus[int(i)] for i in next(retrieval_batches)]
                    loss = batch_loss(model, batch, cfg, dropout_rng, training=True)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"loss is {value}")
                scale(loss, 1.0 / cfg.grad_accum_steps).backward()
                step_loss += value / cfg.grad_accum_steps
        except NonFiniteError as exc:
            diagnostics = {'step': step, 'lr': lr, 'recent_losses': report.losses[-5:],
                           'generation_step': generation_step}
            logger.error("Training diverged at step %d: %s", step, exc)
            set_mode(model, Mode.GENERATION)
            raise TrainingDivergedError(f"non-finite loss at step {step}", diagnostics) from exc

        bucket.sync()
        optimizer.step(lr)
        report.losses.append(step_loss)
        report.learning_rates.append(lr)
        report.generation_steps += int(generation_step)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("step %d/%d loss %.4f lr %.3g%s", step + 1, steps, step_loss, lr,
                        " (generation)" if generation_step else "")

    model.zero_grad()
    set_mode(model, Mode.GENERATION)

    base_after = _base_digests(model)
    report.steps = steps
    report.base_checksum_delta = sum(1 for name, digest in base_after.items() if base_before[name] != digest)
    report.lm_head_digest_after = tensor_digest(model.lm_head)
    report.lm_head_digest_match = report.lm_head_digest_after == lm_head_before
    if not report.lm_head_digest_match:
        logger.warning("lm_head changed during training")
    logger.info("Training finished: final loss %.4f, base tensors changed: %d",
                report.losses[-1], report.base_checksum_delta)
    return report


def train(model: Backbone, corpus: SyntheticCorpus, cfg: TrainConfig) -> TrainReport:
    """
    Retrieval-only training (or joint training when cfg.mode says so).

    Fault flags are undone on return except for lm_head tying, which leaves the model as trained.
    """
    if cfg.mode is TrainingMode.JOINT:
        return train_joint(model, corpus, corpus.generation_examples(), cfg)
    return _run(model, corpus, None, cfg)


def train_joint(model: Backbone, corpus: SyntheticCorpus, gen_corpus: Sequence[GenerationExample],
                cfg: TrainConfig) -> TrainReport:
    """Interleave retrieval batches with next-token batches (adapters on, causal) by step index."""
    if cfg.mode is not TrainingMode.JOINT:
        raise ConfigError("train_joint needs a joint-mode TrainConfig")
    if not gen_corpus:
        raise InvalidInputError("joint training needs generation examples")
    return _run(model, corpus, list(gen_corpus), cfg)
