"""
Checkpoint bundles.

A bundle is a directory holding:

- manifest.json: format version, model config, tensor table and digests
- base.bin: every frozen backbone tensor, little-endian float32
- adapter.bin: the LoRA tensors, stored apart from the base
- lm_head.bin: lm_head on its own, so its digest can be checked in isolation

Digests are SHA-256 over each blob file's bytes (lowercase hex). The lm_head
digest therefore equals tensor_digest(model.lm_head).
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from django.db import DatabaseError

from dualhead.backbone import Backbone, ModelConfig
from dualhead.exceptions import CheckpointError, FormatError, IntegrityError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.json'
SECTION_FILES = {
    'base': 'base.bin',
    'adapter': 'adapter.bin',
    'lm_head': 'lm_head.bin',
}


@dataclass
class TensorEntry:
    name: str
    shape: List[int]
    section: str
    file: str
    offset: int
    nbytes: int


@dataclass
class CheckpointManifest:
    format_version: int
    config: dict
    tensors: List[TensorEntry] = field(default_factory=list)
    digests: Dict[str, str] = field(default_factory=dict)
    lm_head_tied: bool = False
    trainable_params: int = 0

    def to_json(self) -> str:
        payload = {
            'format_version': self.format_version,
            'config': self.config,
            'tensors': [entry.__dict__ for entry in self.tensors],
            'digests': self.digests,
            'lm_head_tied': self.lm_head_tied,
            'trainable_params': self.trainable_params,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> 'CheckpointManifest':
        try:
            payload = json.loads(text)
            return cls(
                format_version=int(payload['format_version']),
                config=payload['config'],
                tensors=[TensorEntry(**entry) for entry in payload['tensors']],
                digests=dict(payload['digests']),
                lm_head_tied=bool(payload.get('lm_head_tied', False)),
                trainable_params=int(payload.get('trainable_params', 0)),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"malformed checkpoint manifest: {exc}") from exc

    @property
    def lm_head_digest(self) -> str:
        return self.digests['lm_head']


def _sections(model: Backbone) -> Dict[str, List[Tuple[str, np.ndarray]]]:
    return {
        'base': [(name, tensor.data) for name, tensor in model.named_base_parameters()],
        'adapter': [(name, tensor.data) for name, tensor in model.named_adapter_parameters()],
        'lm_head': [('lm_head.weight', model.lm_head.data)],
    }


def save_checkpoint(model: Backbone, directory: Union[str, Path]) -> CheckpointManifest:
    """Write model as a bundle under directory (created if needed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = CheckpointManifest(
        format_version=FORMAT_VERSION,
        config=model.config.to_dict(),
        lm_head_tied=model.lm_head_is_tied,
        trainable_params=sum(t.size for _, t in model.named_adapter_parameters()),
    )

    for section, tensors in _sections(model).items():
        filename = SECTION_FILES[section]
        offset = 0
        digest = hashlib.sha256()
        with open(directory / filename, 'wb') as handle:
            for name, array in tensors:
                payload = np.ascontiguousarray(array, dtype='<f4').tobytes()
                handle.write(payload)
                digest.update(payload)
                manifest.tensors.append(TensorEntry(name, list(array.shape), section, filename, offset, len(payload)))
                offset += len(payload)
        manifest.digests[section] = digest.hexdigest()

    (directory / MANIFEST_NAME).write_text(manifest.to_json())
    logger.info("Saved checkpoint to %s (lm_head %s)", directory, manifest.lm_head_digest[:12])
    return manifest


def read_manifest(directory: Union[str, Path]) -> CheckpointManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    manifest = CheckpointManifest.from_json(path.read_text())
    if manifest.format_version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {manifest.format_version}")
    return manifest


def verify_bundle(directory: Union[str, Path], manifest: Optional[CheckpointManifest] = None) -> Dict[str, bytes]:
    """Check every section file against its manifest digest; return the verified blobs."""
    directory = Path(directory)
    manifest = manifest or read_manifest(directory)
    blobs = {}
    for section, filename in SECTION_FILES.items():
        path = directory / filename
        if not path.is_file():
            raise CheckpointError(f"checkpoint section missing: {path}")
        blob = path.read_bytes()
        expected = manifest.digests.get(section)
        if not expected:
            raise IntegrityError(f"manifest has no digest for section {section}")
        if hashlib.sha256(blob).hexdigest() != expected:
            raise IntegrityError(f"digest mismatch for {filename}")
        blobs[section] = blob

    names = {}
    for entry in manifest.tensors:
        if entry.name in names and names[entry.name] != entry.section:
            raise IntegrityError(f"tensor {entry.name} appears in sections {names[entry.name]} and {entry.section}")
        names[entry.name] = entry.section
    return blobs


def load_checkpoint(directory: Union[str, Path]) -> Backbone:
    """Rebuild a model from a verified bundle."""
    manifest = read_manifest(directory)
    blobs = verify_bundle(directory, manifest)
    model = Backbone(ModelConfig.from_dict(manifest.config))
    if manifest.lm_head_tied:
        model.tie_lm_head()

    targets = dict(model.named_base_parameters())
    targets.update(model.named_adapter_parameters())
    targets['lm_head.weight'] = model.lm_head

    for entry in manifest.tensors:
        if entry.name not in targets:
            raise CheckpointError(f"checkpoint tensor {entry.name} does not exist in this model")
        tensor = targets[entry.name]
        if list(tensor.shape) != list(entry.shape):
            raise CheckpointError(f"shape mismatch for {entry.name}: {entry.shape} vs {list(tensor.shape)}")
        values = np.frombuffer(blobs[entry.section], dtype='<f4', count=entry.nbytes // 4, offset=entry.offset)
        tensor.data = values.reshape(entry.shape).astype(np.float32)

    logger.info("Loaded checkpoint from %s", directory)
    return model


def register_checkpoint(directory: Union[str, Path], manifest: CheckpointManifest):
    """Best-effort CheckpointRecord row for a saved bundle."""
    from harness.models import CheckpointRecord

    try:
        CheckpointRecord.objects.update_or_create(
            bundle_path=str(Path(directory).resolve()),
            defaults={
                'format_version': manifest.format_version,
                'lm_head_digest': manifest.digests['lm_head'],
                'base_digest': manifest.digests['base'],
                'adapter_digest': manifest.digests['adapter'],
                'trainable_params': manifest.trainable_params,
            },
        )
    except DatabaseError as exc:
        logger.warning("Could not record checkpoint %s: %s", directory, exc)
