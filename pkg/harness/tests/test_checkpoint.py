import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import TestCase

from dualhead.backbone import Backbone
from dualhead.exceptions import CheckpointError, FormatError, IntegrityError
from dualhead.tensorcore import tensor_digest
from dualhead.tests.support import randomize_adapters, tiny_config
from harness.models import CheckpointRecord
from harness.services.checkpoint_service import (
    load_checkpoint,
    read_manifest,
    register_checkpoint,
    save_checkpoint,
)


class CheckpointBundleTests(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.bundle = Path(self.tmp.name) / 'bundle'
        self.model = Backbone(tiny_config())
        randomize_adapters(self.model)

    def test_round_trip_restores_every_tensor(self):
        save_checkpoint(self.model, self.bundle)
        restored = load_checkpoint(self.bundle)
        self.assertEqual(restored.config, self.model.config)

        expected = dict(self.model.named_base_parameters() + self.model.named_adapter_parameters())
        for name, tensor in restored.named_base_parameters() + restored.named_adapter_parameters():
            np.testing.assert_array_equal(tensor.data, expected[name].data, err_msg=name)
        np.testing.assert_array_equal(restored.lm_head.data, self.model.lm_head.data)

    def test_lm_head_digest_matches_tensor_digest(self):
        manifest = save_checkpoint(self.model, self.bundle)
        self.assertEqual(manifest.lm_head_digest, tensor_digest(self.model.lm_head))
        self.assertEqual(read_manifest(self.bundle).lm_head_digest, manifest.lm_head_digest)

    def test_adapters_stored_apart_from_base(self):
        manifest = save_checkpoint(self.model, self.bundle)
        sections = {entry.name: entry.section for entry in manifest.tensors}
        self.assertTrue(all(sections[name] == 'adapter' for name, _ in self.model.named_adapter_parameters()))
        self.assertTrue(all(sections[name] == 'base' for name, _ in self.model.named_base_parameters()))
        self.assertEqual(sections['lm_head.weight'], 'lm_head')

    def test_tampered_lm_head_is_rejected(self):
        save_checkpoint(self.model, self.bundle)
        blob = bytearray((self.bundle / 'lm_head.bin').read_bytes())
        blob[0] ^= 0xFF
        (self.bundle / 'lm_head.bin').write_bytes(bytes(blob))
        with self.assertRaises(IntegrityError):
            load_checkpoint(self.bundle)

    def test_missing_bundle(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.bundle)

    def test_missing_section(self):
        save_checkpoint(self.model, self.bundle)
        (self.bundle / 'adapter.bin').unlink()
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.bundle)

    def test_unsupported_format_version(self):
        save_checkpoint(self.model, self.bundle)
        manifest_path = self.bundle / 'manifest.json'
        payload = json.loads(manifest_path.read_text())
        payload['format_version'] = 99
        manifest_path.write_text(json.dumps(payload))
        with self.assertRaises(FormatError):
            load_checkpoint(self.bundle)

    def test_malformed_manifest(self):
        save_checkpoint(self.model, self.bundle)
        (self.bundle / 'manifest.json').write_text('{not json')
        with self.assertRaises(FormatError):
            load_checkpoint(self.bundle)

    def test_tied_lm_head_stays_tied(self):
        self.model.tie_lm_head()
        manifest = save_checkpoint(self.model, self.bundle)
        self.assertTrue(manifest.lm_head_tied)
        self.assertTrue(load_checkpoint(self.bundle).lm_head_is_tied)

    def test_register_checkpoint(self):
        manifest = save_checkpoint(self.model, self.bundle)
        register_checkpoint(self.bundle, manifest)
        register_checkpoint(self.bundle, manifest)

        record = CheckpointRecord.objects.get()
        self.assertEqual(record.bundle_path, str(self.bundle.resolve()))
        self.assertEqual(record.lm_head_digest, manifest.lm_head_digest)
        self.assertEqual(record.trainable_params, manifest.trainable_params)
