"""
Experiment protocols.

Each protocol returns an ExperimentReport: per-sample records, a summary,
named pass/fail checks, and an environment stamp (seed and config hash).
Wall-clock timings and the checks that depend on them are kept apart so a
re-run with the same seed compares equal on everything else.
"""

import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from django.db import DatabaseError, transaction
from django.utils import timezone

from dualhead.backbone import Backbone, ModelConfig, count_trainable_params
from dualhead.corpus import CorpusPair, SyntheticCorpus, held_out_corpus
from dualhead.generation import DecodeParams, Greedy, Sample, anls, generate, generate_nocache
from dualhead.modeswitch import Mode, mode_roundtrip_check, set_mode, time_mode_roundtrips
from dualhead.retrieval import Index, embed, evaluate_rankings, ndcg_at_k, search
from dualhead.training import TrainConfig, TrainingMode, train
from dualhead.vocab import CONTENT_TOKEN_COUNT, CONTENT_TOKEN_START, decode_tokens

from .checkpoint_service import load_checkpoint, register_checkpoint, save_checkpoint
from .config_loader import config_hash
from .statistics import paired_bootstrap_ci, tost_equivalence, wilcoxon_signed_rank

logger = logging.getLogger(__name__)

SAMPLING_TEMPERATURE = 0.7
SAMPLING_TOP_P = 0.8
TOST_EPSILON = 0.01


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, tuple)):
        return list(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


@dataclass
class ExperimentReport:
    name: str
    environment: dict
    records: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    timing_checks: Dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values()) and all(self.timing_checks.values())

    def comparable(self) -> dict:
        """Everything that must reproduce under the same seed (timings excluded)."""
        return json.loads(json.dumps({
            'name': self.name,
            'environment': self.environment,
            'records': self.records,
            'summary': self.summary,
            'checks': self.checks,
        }, default=_jsonable, sort_keys=True))

    def to_jsonl(self) -> str:
        header = {
            'type': 'report',
            'name': self.name,
            'environment': self.environment,
            'summary': self.summary,
            'checks': self.checks,
            'timings': self.timings,
            'timing_checks': self.timing_checks,
            'passed': self.passed,
        }
        lines = [json.dumps(header, default=_jsonable, sort_keys=True)]
        for index, record in enumerate(self.records):
            lines.append(json.dumps({'type': 'sample', 'index': index, **record}, default=_jsonable, sort_keys=True))
        return '\n'.join(lines) + '\n'

    def summary_table(self) -> str:
        rows = [(key, value) for key, value in self.summary.items()]
        rows += [(f"timing: {key}", value) for key, value in self.timings.items()]
        rows += [(f"check: {key}", 'PASS' if ok else 'FAIL') for key, ok in self.checks.items()]
        rows += [(f"check: {key}", 'PASS' if ok else 'FAIL') for key, ok in self.timing_checks.items()]
        width = max([len(key) for key, _ in rows] + [len(self.name)])

        def render(value):
            if isinstance(value, float):
                return f"{value:.6g}"
            return str(value)

        lines = [self.name, '=' * (width + 24)]
        lines += [f"{key:<{width}}  {render(value)}" for key, value in rows]
        lines.append(f"{'result':<{width}}  {'PASSED' if self.passed else 'FAILED'}")
        return '\n'.join(lines)

    def write(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jsonl_path = out_dir / f"{self.name}.jsonl"
        jsonl_path.write_text(self.to_jsonl())
        (out_dir / f"{self.name}.txt").write_text(self.summary_table() + '\n')
        return jsonl_path


def environment_stamp(seed: int, model_cfg: ModelConfig, train_cfg: Optional[TrainConfig] = None) -> dict:
    return {'seed': seed, 'config_hash': config_hash(model_cfg, train_cfg)}


def record_run(report: ExperimentReport, report_path: Union[str, Path] = '', error: str = ''):
    """Store the run and its samples. Best-effort: database trouble never fails an experiment."""
    from harness.models import ExperimentRun, ExperimentSample

    try:
        with transaction.atomic():
            run = ExperimentRun.objects.create(
                name=report.name,
                seed=report.environment.get('seed', 0),
                config_hash=report.environment.get('config_hash', ''),
            )
            run.status = 'failed' if error else 'completed'
            run.passed = None if error else report.passed
            run.summary = json.loads(json.dumps(report.summary, default=_jsonable))
            run.report_path = str(report_path)
            run.error_message = error
            run.completed_at = timezone.now()
            run.save()
            ExperimentSample.objects.bulk_create([
                ExperimentSample(run=run, sample_index=i, payload=json.loads(json.dumps(record, default=_jsonable)))
                for i, record in enumerate(report.records)
            ])
        return run
    except DatabaseError as exc:
        logger.warning("Could not record %s run: %s", report.name, exc)
        return None


# --------------------------------------------------------------------------- #
# Retrieval evaluation
# --------------------------------------------------------------------------- #

def build_index(model: Backbone, pairs: Sequence[CorpusPair]) -> Index:
    index = Index(model.config.proj_dim)
    for pair in pairs:
        index.add(pair.doc_id, embed(model, pair.document_input(), is_query=False, source_id=pair.doc_id))
    return index


def retrieval_metrics(model: Backbone, corpus: SyntheticCorpus, k: int = 5) -> Tuple[dict, List[dict]]:
    """Rank every query of corpus against all of its documents (one relevant page each)."""
    index = build_index(model, corpus.pairs)
    results, relevance, records = {}, {}, []
    for pair in corpus:
        query = embed(model, pair.query_input(), is_query=True, source_id=pair.doc_id)
        ranking = search(index, query, max(k, 10))
        results[pair.doc_id] = ranking
        relevance[pair.doc_id] = {pair.doc_id}
        ids = ranking.doc_ids
        records.append({
            'query': pair.doc_id,
            'top_doc': ids[0],
            'relevant_rank': ids.index(pair.doc_id) + 1 if pair.doc_id in ids else None,
            f'ndcg@{k}': ndcg_at_k(ranking, {pair.doc_id}, k),
        })
    return evaluate_rankings(results, relevance, k), records


def evaluate_retrieval(model: Backbone, seed: int, n_held_out: int = 200, k: int = 5,
                       untrained: Optional[Backbone] = None, min_ndcg: float = 0.90,
                       min_gain: float = 0.30) -> ExperimentReport:
    """Held-out nDCG@k, Recall and MRR for model against an untrained backbone of the same config."""
    held_out = held_out_corpus(n_held_out, seed, model.config.patch_dim)
    untrained = untrained or Backbone(model.config)

    trained_summary, trained_records = retrieval_metrics(model, held_out, k)
    untrained_summary, untrained_records = retrieval_metrics(untrained, held_out, k)

    key = f'ndcg@{k}'
    trained_scores = [r[key] for r in trained_records]
    untrained_scores = [r[key] for r in untrained_records]
    bootstrap = paired_bootstrap_ci(trained_scores, untrained_scores, resamples=2000, seed=seed)

    report = ExperimentReport('eval_retrieval', environment_stamp(seed, model.config))
    for trained_row, untrained_row in zip(trained_records, untrained_records):
        report.records.append({**trained_row, f'untrained_{key}': untrained_row[key]})
    report.summary = {
        **{f'trained_{name}': value for name, value in trained_summary.items()},
        **{f'untrained_{name}': value for name, value in untrained_summary.items() if name != 'n_queries'},
        f'{key}_gain': trained_summary[key] - untrained_summary[key],
        'gain_ci_lo': bootstrap.ci_lo,
        'gain_ci_hi': bootstrap.ci_hi,
        'gain_bootstrap_p': bootstrap.p_value,
        'gain_wilcoxon_p': wilcoxon_signed_rank(trained_scores, untrained_scores),
    }
    report.checks = {
        f'{key}_at_least_{min_ndcg}': trained_summary[key] >= min_ndcg,
        f'gain_at_least_{min_gain}': trained_summary[key] - untrained_summary[key] >= min_gain,
    }
    return report


# --------------------------------------------------------------------------- #
# Equivalence and contamination
# --------------------------------------------------------------------------- #

def sampling_seed(seed: int, index: int) -> int:
    return seed * 1_000_003 + index


def equivalence_suite(model: Backbone, n_prompts: int = 100, params: Optional[DecodeParams] = None,
                      seed: int = 42, pristine: Optional[Backbone] = None) -> ExperimentReport:
    """
    Generation after mode-switch histories versus a pristine adapter-free copy.

    Runs n greedy and n seeded-sampling prompts. Before each prompt the model
    embeds a few pages in retrieval mode, so every generation follows a
    different switch history.
    """
    params = params or DecodeParams(max_new_tokens=16)
    pristine = pristine or model.clone_base()
    pairs = held_out_corpus(n_prompts, seed, model.config.patch_dim).pairs

    report = ExperimentReport('equivalence', environment_stamp(seed, model.config))
    deltas = []
    for strategy_name in ('greedy', 'sampled'):
        for i, pair in enumerate(pairs):
            if strategy_name == 'greedy':
                strategy = Greedy()
            else:
                strategy = Sample(SAMPLING_TEMPERATURE, SAMPLING_TOP_P, sampling_seed(seed, i))
            run_params = replace(params, strategy=strategy)

            for _ in range(i % 3 + 1):
                embed(model, pair.document_input(), is_query=False)
            toggled = generate(model, pair.query_tokens, pair.patches, run_params)
            baseline = generate(pristine, pair.query_tokens, pair.patches, run_params)

            gold = [decode_tokens(pair.doc_tokens)]
            anls_toggled = anls(decode_tokens(toggled), gold)
            anls_baseline = anls(decode_tokens(baseline), gold)
            deltas.append(anls_toggled - anls_baseline)
            report.records.append({
                'prompt': i,
                'strategy': strategy_name,
                'exact_match': toggled == baseline,
                'anls_toggled': anls_toggled,
                'anls_baseline': anls_baseline,
                'anls_delta': anls_toggled - anls_baseline,
            })

    def match_rate(name):
        rows = [r['exact_match'] for r in report.records if r['strategy'] == name]
        return float(np.mean(rows)) if rows else 1.0

    tost = tost_equivalence(deltas, epsilon=TOST_EPSILON)
    report.summary = {
        'n_prompts': n_prompts,
        'greedy_exact_match': match_rate('greedy'),
        'sampled_exact_match': match_rate('sampled'),
        'max_abs_anls_delta': float(np.max(np.abs(deltas))),
        'mean_anls_toggled': float(np.mean([r['anls_toggled'] for r in report.records])),
        'mean_anls_baseline': float(np.mean([r['anls_baseline'] for r in report.records])),
        'tost_p': tost.p_value,
        'tost_ci_lo': tost.ci[0],
        'tost_ci_hi': tost.ci[1],
    }
    report.checks = {
        'greedy_exact_match': report.summary['greedy_exact_match'] == 1.0,
        'sampled_exact_match': report.summary['sampled_exact_match'] == 1.0,
        'tost_equivalent': tost.equivalent(),
    }
    return report


def contamination(model: Backbone, n_inputs: int = 50, seed: int = 42,
                  max_new_tokens: int = 8) -> ExperimentReport:
    """embed -> generate -> embed -> generate on n_inputs pages, against single-pass outputs."""
    pairs = held_out_corpus(n_inputs, seed, model.config.patch_dim).pairs
    roundtrip = mode_roundtrip_check(model, [pair.probe_input() for pair in pairs],
                                     DecodeParams(max_new_tokens=max_new_tokens))
    report = ExperimentReport('contamination', environment_stamp(seed, model.config))
    report.records = roundtrip.records
    report.summary = {
        'n_inputs': roundtrip.n_inputs,
        'cycles': roundtrip.cycles,
        'max_embedding_diff': roundtrip.max_embedding_diff,
        'min_cosine_similarity': roundtrip.min_cosine_similarity,
        'generation_identical_fraction': roundtrip.generation_identical_fraction,
    }
    report.checks = {
        'embeddings_bitwise_identical': roundtrip.max_embedding_diff == 0.0,
        'generations_identical': roundtrip.generation_identical_fraction == 1.0,
    }
    return report


# --------------------------------------------------------------------------- #
# Efficiency
# --------------------------------------------------------------------------- #

def parameter_bytes(model: Backbone) -> Tuple[int, int]:
    """(single-model bytes, two-model bytes) as float32 parameter storage."""
    base = sum(t.size for _, t in model.named_base_parameters())
    if not model.lm_head_is_tied:
        base += model.lm_head.size
    adapters = sum(t.size for _, t in model.named_adapter_parameters())
    return 4 * (base + adapters), 4 * 2 * base


def efficiency_suite(model_cfg: ModelConfig, seed: int = 42, iterations: int = 50, prompt_len: int = 64,
                     new_tokens: int = 64, model: Optional[Backbone] = None,
                     max_switch_fraction: float = 0.10, min_speedup: float = 2.0) -> ExperimentReport:
    """
    Parameter-byte footprint, mode-switch latency and cached-decode speedup.

    Parameter bytes stand in for device memory: activations and framework
    overhead are not modeled.
    """
    model = model or Backbone(model_cfg)
    single_bytes, two_bytes = parameter_bytes(model)
    formula = count_trainable_params(model_cfg)
    enumerated = sum(t.size for _, t in model.named_adapter_parameters())

    rng = np.random.default_rng([seed, 7])
    prompt = rng.integers(CONTENT_TOKEN_START, CONTENT_TOKEN_START + CONTENT_TOKEN_COUNT, size=prompt_len)
    params = DecodeParams(max_new_tokens=new_tokens, strategy=Greedy(), stop_token=-1)

    roundtrips = time_mode_roundtrips(model, iterations)
    started = time.perf_counter()
    cached_tokens = generate(model, prompt, None, params)
    cached_seconds = time.perf_counter() - started
    started = time.perf_counter()
    uncached_tokens = generate_nocache(model, prompt, None, params)
    uncached_seconds = time.perf_counter() - started

    mean_roundtrip = float(np.mean(roundtrips))
    report = ExperimentReport('efficiency', environment_stamp(seed, model_cfg))
    report.summary = {
        'parameter_bytes_single_model': single_bytes,
        'parameter_bytes_two_models': two_bytes,
        'parameter_bytes_ratio': single_bytes / two_bytes,
        'memory_proxy': 'float32 parameter bytes (activations not modeled)',
        'adapter_params_formula': formula,
        'adapter_params_enumerated': enumerated,
        'trainable_fraction': enumerated / (single_bytes // 4),
        'prompt_len': prompt_len,
        'new_tokens': new_tokens,
        'decode_tokens_identical': cached_tokens == uncached_tokens,
    }
    report.checks = {
        'single_model_smaller': single_bytes < two_bytes,
        'adapter_formula_matches': formula == enumerated,
        'decode_tokens_identical': cached_tokens == uncached_tokens,
    }
    report.timings = {
        'switch_roundtrip_mean_ms': 1000.0 * mean_roundtrip,
        'switch_roundtrip_max_ms': 1000.0 * float(np.max(roundtrips)),
        'generate_cached_seconds': cached_seconds,
        'generate_uncached_seconds': uncached_seconds,
        'switch_fraction_of_generation': mean_roundtrip / cached_seconds,
        'cache_speedup': uncached_seconds / cached_seconds,
    }
    report.timing_checks = {
        f'switch_fraction_below_{max_switch_fraction}': report.timings['switch_fraction_of_generation'] < max_switch_fraction,
        f'cache_speedup_at_least_{min_speedup}': report.timings['cache_speedup'] >= min_speedup,
    }
    return report


# --------------------------------------------------------------------------- #
# Joint-training ablation
# --------------------------------------------------------------------------- #

ABLATION_LABELS = ('retrieval_only', 'joint')


def train_ablation_checkpoints(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: SyntheticCorpus,
                               out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Train one retrieval-only and one joint model from the same init and save both bundles."""
    out_dir = Path(out_dir)
    paths = {}
    for label, mode in zip(ABLATION_LABELS, (TrainingMode.RETRIEVAL_ONLY, TrainingMode.JOINT)):
        model = Backbone(model_cfg)
        train(model, corpus, replace(train_cfg, mode=mode))
        paths[label] = out_dir / label
        register_checkpoint(paths[label], save_checkpoint(model, paths[label]))
    return paths


def ablate(model_cfg: ModelConfig, checkpoints: Mapping[str, Union[str, Path]], seed: int = 42,
           n_held_out: int = 200, n_gen_prompts: int = 50, max_new_tokens: int = 8,
           max_ndcg_gap: float = 0.05) -> ExperimentReport:
    """
    Three-mode comparison of the retrieval-only and joint checkpoints.

    Modes: adapters on with bidirectional attention (held-out nDCG@5),
    adapters off with causal attention (generation versus the base model),
    adapters on with causal attention (disagreement with the base model and
    the most frequent first token).
    """
    models = {label: load_checkpoint(checkpoints[label]) for label in ABLATION_LABELS}
    base = models[ABLATION_LABELS[0]].clone_base()
    held_out = held_out_corpus(n_held_out, seed, model_cfg.patch_dim)
    prompts = held_out.pairs[:n_gen_prompts]
    params = DecodeParams(max_new_tokens=max_new_tokens)
    base_outputs = [generate(base, p.query_tokens, p.patches, params) for p in prompts]

    report = ExperimentReport('ablation', environment_stamp(seed, model_cfg))
    per_query = {}
    rows = {}
    for label, model in models.items():
        metrics, records = retrieval_metrics(model, held_out)
        per_query[label] = [r['ndcg@5'] for r in records]
        lora_off = [generate(model, p.query_tokens, p.patches, params, Mode.GENERATION) for p in prompts]
        lora_on = [generate(model, p.query_tokens, p.patches, params, Mode.ADAPTED_GENERATION) for p in prompts]
        set_mode(model, Mode.GENERATION)

        first_tokens = Counter(tokens[0] if tokens else None for tokens in lora_on)
        top_token, top_count = first_tokens.most_common(1)[0]
        rows[label] = {
            'ndcg@5': metrics['ndcg@5'],
            'lora_off_identical_to_base': float(np.mean([a == b for a, b in zip(lora_off, base_outputs)])),
            'lora_on_disagreement_with_base': float(np.mean([a != b for a, b in zip(lora_on, base_outputs)])),
            'lora_on_top_first_token': top_token,
            'lora_on_top_first_token_rate': top_count / len(prompts),
        }
        report.records.append({'checkpoint': label, 'mode': 'lora_on_bidirectional', 'ndcg@5': metrics['ndcg@5'],
                               'recall@1': metrics['recall@1'], 'mrr': metrics['mrr']})
        report.records.append({'checkpoint': label, 'mode': 'lora_off_causal',
                               'identical_to_base': rows[label]['lora_off_identical_to_base']})
        report.records.append({'checkpoint': label, 'mode': 'lora_on_causal',
                               'disagreement_with_base': rows[label]['lora_on_disagreement_with_base'],
                               'top_first_token': top_token,
                               'top_first_token_rate': rows[label]['lora_on_top_first_token_rate']})

    first, second = (models[label] for label in ABLATION_LABELS)
    second_adapters = dict(second.named_adapter_parameters())
    adapter_max_diff = max(
        float(np.max(np.abs(tensor.data - second_adapters[name].data)))
        for name, tensor in first.named_adapter_parameters()
    )
    ndcg_gap = abs(rows['retrieval_only']['ndcg@5'] - rows['joint']['ndcg@5'])
    bootstrap = paired_bootstrap_ci(per_query['retrieval_only'], per_query['joint'], resamples=2000, seed=seed)

    report.summary = {
        **{f'{label}_{key}': value for label, row in rows.items() for key, value in row.items()},
        'ndcg@5_gap': ndcg_gap,
        'ndcg@5_gap_ci_lo': bootstrap.ci_lo,
        'ndcg@5_gap_ci_hi': bootstrap.ci_hi,
        'ndcg@5_wilcoxon_p': wilcoxon_signed_rank(per_query['retrieval_only'], per_query['joint']),
        'adapter_max_abs_diff': adapter_max_diff,
    }
    report.checks = {
        'lora_off_identical_retrieval_only': rows['retrieval_only']['lora_off_identical_to_base'] == 1.0,
        'lora_off_identical_joint': rows['joint']['lora_off_identical_to_base'] == 1.0,
        f'ndcg_gap_below_{max_ndcg_gap}': ndcg_gap < max_ndcg_gap,
    }
    return report
