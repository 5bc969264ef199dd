"""
Experiment configuration files.

A config file is a plain KEY=value file (the same format python-decouple
reads for .env files). Every ModelConfig and TrainConfig field has a key;
keys left out fall back to the dataclass defaults. As with any decouple
repository, an environment variable of the same name takes precedence.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Optional, Tuple, Union

from decouple import Config, Csv, RepositoryEmpty, RepositoryEnv, UndefinedValueError

from dualhead.backbone import LayerSpec, ModelConfig
from dualhead.exceptions import ConfigError
from dualhead.training import TrainConfig, TrainingMode

logger = logging.getLogger(__name__)

MODEL_DEFAULTS = ModelConfig()
TRAIN_DEFAULTS = TrainConfig()


def _optional_int(value: str) -> Optional[int]:
    value = str(value).strip()
    return None if value.lower() in ('', 'none') else int(value)


def _repository(path: Optional[Union[str, Path]]) -> Config:
    if path is None:
        return Config(RepositoryEmpty())
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return Config(RepositoryEnv(str(path)))


def load_model_config(source: Config) -> ModelConfig:
    d = MODEL_DEFAULTS
    schedule = source('LAYER_SCHEDULE', default=','.join(str(s) for s in d.layer_schedule), cast=Csv())
    return ModelConfig(
        vocab_size=source('VOCAB_SIZE', default=d.vocab_size, cast=int),
        hidden_dim=source('HIDDEN_DIM', default=d.hidden_dim, cast=int),
        num_layers=source('NUM_LAYERS', default=len(schedule), cast=int),
        layer_schedule=tuple(LayerSpec.parse(entry) for entry in schedule),
        num_heads=source('NUM_HEADS', default=d.num_heads, cast=int),
        ffn_dim=source('FFN_DIM', default=d.ffn_dim, cast=int),
        proj_dim=source('PROJ_DIM', default=d.proj_dim, cast=int),
        lora_rank=source('LORA_RANK', default=d.lora_rank, cast=int),
        lora_alpha=source('LORA_ALPHA', default=d.lora_alpha, cast=int),
        lora_dropout=source('LORA_DROPOUT', default=d.lora_dropout, cast=float),
        tie_lm_head_to_embedding=source('TIE_LM_HEAD', default=d.tie_lm_head_to_embedding, cast=bool),
        max_seq_len=source('MAX_SEQ_LEN', default=d.max_seq_len, cast=int),
        patch_dim=source('PATCH_DIM', default=d.patch_dim, cast=int),
        seed=source('MODEL_SEED', default=d.seed, cast=int),
    )


def load_train_config(source: Config) -> TrainConfig:
    d = TRAIN_DEFAULTS
    return TrainConfig(
        temperature=source('TEMPERATURE', default=d.temperature, cast=float),
        lr=source('LR', default=d.lr, cast=float),
        warmup_frac=source('WARMUP_FRAC', default=d.warmup_frac, cast=float),
        epochs=source('EPOCHS', default=d.epochs, cast=int),
        batch_size=source('BATCH_SIZE', default=d.batch_size, cast=int),
        grad_accum_steps=source('GRAD_ACCUM_STEPS', default=d.grad_accum_steps, cast=int),
        weight_decay=source('WEIGHT_DECAY', default=d.weight_decay, cast=float),
        mode=TrainingMode(source('TRAIN_MODE', default=d.mode.value).strip().lower()),
        gen_frac=source('GEN_FRAC', default=d.gen_frac, cast=float),
        max_steps=source('MAX_STEPS', default='none', cast=_optional_int),
        fault_tied_lm_head=source('FAULT_TIED_LM_HEAD', default=d.fault_tied_lm_head, cast=bool),
        fault_unfrozen_lm_head=source('FAULT_UNFROZEN_LM_HEAD', default=d.fault_unfrozen_lm_head, cast=bool),
        spurious_grad_accumulation=source('SPURIOUS_GRAD_ACCUMULATION',
                                          default=d.spurious_grad_accumulation, cast=bool),
        log_every=source('LOG_EVERY', default=d.log_every, cast=int),
        seed=source('TRAIN_SEED', default=d.seed, cast=int),
    )


def load_experiment_config(path: Optional[Union[str, Path]] = None) -> Tuple[ModelConfig, TrainConfig]:
    """Both configs from a KEY=value file (or all defaults when path is None)."""
    source = _repository(path)
    try:
        model_cfg = load_model_config(source)
        train_cfg = load_train_config(source)
    except ConfigError:
        raise
    except (ValueError, UndefinedValueError) as exc:
        raise ConfigError(f"invalid value in {path}: {exc}") from exc
    logger.debug("Loaded experiment config from %s", path or 'defaults')
    return model_cfg, train_cfg


def config_hash(model_cfg: ModelConfig, train_cfg: Optional[TrainConfig] = None) -> str:
    """SHA-256 over the canonical JSON of both configs."""
    payload = {'model': model_cfg.to_dict(), 'train': train_cfg.to_dict() if train_cfg else None}
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
