import os
import tempfile
from pathlib import Path
from unittest import mock

from django.conf import settings
from django.test import SimpleTestCase

from dualhead.backbone import LayerSpec, ModelConfig
from dualhead.exceptions import ConfigError
from dualhead.training import TrainConfig, TrainingMode
from harness.services.config_loader import config_hash, load_experiment_config

TOY_CONFIG = Path(settings.BASE_DIR) / 'configs' / 'toy.cfg'


class ConfigLoaderTests(SimpleTestCase):
    def write(self, text):
        handle = tempfile.NamedTemporaryFile('w', suffix='.cfg', delete=False)
        handle.write(text)
        handle.close()
        self.addCleanup(os.unlink, handle.name)
        return handle.name

    def test_toy_config(self):
        model_cfg, train_cfg = load_experiment_config(TOY_CONFIG)
        self.assertEqual(model_cfg.layer_schedule[1], LayerSpec('sliding', 8))
        self.assertEqual(model_cfg.lora_rank, 16)
        self.assertEqual(model_cfg.lora_alpha, 64)
        self.assertEqual(model_cfg.patch_dim, 16)
        self.assertEqual(train_cfg.temperature, 0.02)
        self.assertEqual(train_cfg.mode, TrainingMode.RETRIEVAL_ONLY)
        self.assertIsNone(train_cfg.max_steps)
        self.assertFalse(train_cfg.fault_tied_lm_head)

    def test_defaults_without_a_file(self):
        self.assertEqual(load_experiment_config(None), (ModelConfig(), TrainConfig()))

    def test_partial_file_falls_back_to_defaults(self):
        path = self.write("HIDDEN_DIM=32\nNUM_LAYERS=2\nLAYER_SCHEDULE=full,sliding:4\nTRAIN_MODE=joint\nMAX_STEPS=7\n")
        model_cfg, train_cfg = load_experiment_config(path)
        self.assertEqual(model_cfg.hidden_dim, 32)
        self.assertEqual(model_cfg.num_layers, 2)
        self.assertEqual(model_cfg.ffn_dim, ModelConfig().ffn_dim)
        self.assertIs(train_cfg.mode, TrainingMode.JOINT)
        self.assertEqual(train_cfg.max_steps, 7)

    def test_patch_dim_key(self):
        model_cfg, _ = load_experiment_config(self.write("PATCH_DIM=12\n"))
        self.assertEqual(model_cfg.patch_dim, 12)

    def test_environment_overrides_file(self):
        path = self.write("LORA_RANK=8\n")
        with mock.patch.dict(os.environ, {'LORA_RANK': '4'}):
            model_cfg, _ = load_experiment_config(path)
        self.assertEqual(model_cfg.lora_rank, 4)

    def test_invalid_values(self):
        for text in ("LORA_RANK=many\n", "TRAIN_MODE=sideways\n", "LAYER_SCHEDULE=full,local\n", "LORA_RANK=0\n"):
            with self.assertRaises(ConfigError):
                load_experiment_config(self.write(text))

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_experiment_config('/nonexistent/toy.cfg')

    def test_config_hash(self):
        model_cfg, train_cfg = load_experiment_config(TOY_CONFIG)
        self.assertEqual(config_hash(model_cfg, train_cfg), config_hash(*load_experiment_config(TOY_CONFIG)))
        self.assertNotEqual(config_hash(model_cfg, train_cfg), config_hash(model_cfg, TrainConfig(lr=1e-3)))
        self.assertEqual(len(config_hash(model_cfg)), 64)
