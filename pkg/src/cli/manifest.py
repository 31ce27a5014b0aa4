"""
Run manifests: everything needed to repeat a training run bit for bit
"""

import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Optional

from src.core.trainer import TrainConfig
from src.data.dataset import file_checksum
from src.utils.errors import ConfigurationError, FormatError
from src.utils.logger import logger


MANIFEST_FILE = 'manifest.json'
MANIFEST_VERSION = 1


@dataclass
class DatasetRef:
    """An input file and its sha256"""
    path: str
    sha256: str

    @classmethod
    def of(cls, path: str) -> 'DatasetRef':
        return cls(path=path, sha256=file_checksum(path))


@dataclass
class RunManifest:
    """
    Attributes:
        config: TrainConfig fields
        train_images: Training IDX file
        test_images: Test IDX file (None when training without evaluation)
        ratio: original:noise proportion mixed into the training set, None for clean
        mix_seed: Seed of the mixing shuffle
        seed: Training seed
        started_at: UTC timestamp written before the first epoch
        finished_at: UTC timestamp written after the last artifact
        outputs: Artifact name -> path
    """
    config: Dict[str, Any]
    train_images: DatasetRef
    test_images: Optional[DatasetRef]
    ratio: Optional[str]
    mix_seed: int
    seed: int
    started_at: str = ''
    finished_at: Optional[str] = None
    outputs: Dict[str, str] = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_mapping(self.config)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunManifest':
        if data.get('version') != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {data.get('version')!r}")
        try:
            test = data.get('test_images')
            return cls(
                config=dict(data['config']),
                train_images=DatasetRef(**data['train_images']),
                test_images=DatasetRef(**test) if test else None,
                ratio=data.get('ratio'),
                mix_seed=int(data['mix_seed']),
                seed=int(data['seed']),
                started_at=data.get('started_at', ''),
                finished_at=data.get('finished_at'),
                outputs=dict(data.get('outputs') or {}),
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"manifest is missing or has a malformed field: {e}")


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')


def write_manifest(manifest: RunManifest, run_dir: str) -> str:
    """Write manifest.json into run_dir (keys sorted, so equal manifests give equal bytes)"""
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, MANIFEST_FILE)
    with open(path, 'w') as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def read_manifest(path: str) -> RunManifest:
    """
    Load a manifest written by write_manifest

    Args:
        path: manifest.json, or the run directory holding it

    Returns:
        RunManifest
    """
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_FILE)
    with open(path, 'r') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not valid JSON ({e})")
    return RunManifest.from_dict(data)


def verify_inputs(manifest: RunManifest):
    """Refuse to reproduce a run whose input files have changed"""
    refs = [manifest.train_images] + ([manifest.test_images] if manifest.test_images else [])
    for ref in refs:
        actual = file_checksum(ref.path)
        if actual != ref.sha256:
            raise ConfigurationError(
                f"{ref.path}: sha256 {actual} differs from the manifest ({ref.sha256})"
            )
        logger.debug(f"Verified {ref.path} ({actual[:12]})")
