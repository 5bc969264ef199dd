"""Small configurations and markers shared by the test packages."""

import unittest

import numpy as np
from django.conf import settings

from dualhead.backbone import ModelConfig

slow = unittest.skipUnless(settings.HYDRA['RUN_SLOW_TESTS'], 'slow: set HYDRA_RUN_SLOW_TESTS=True')


def tiny_config(**overrides) -> ModelConfig:
    values = dict(
        hidden_dim=16,
        num_layers=2,
        layer_schedule=('full', 'sliding:4'),
        num_heads=2,
        ffn_dim=32,
        proj_dim=8,
        lora_rank=4,
        lora_alpha=16,
        max_seq_len=96,
    )
    values.update(overrides)
    return ModelConfig(**values)


def randomize_adapters(model, seed: int = 3, std: float = 0.05):
    """Give every lora_B a nonzero value so adapters actually change outputs."""
    rng = np.random.default_rng(seed)
    for _, tensor in model.named_adapter_parameters():
        if tensor.name.endswith('lora_B'):
            tensor.data = rng.normal(0.0, std, tensor.shape).astype(np.float32)
