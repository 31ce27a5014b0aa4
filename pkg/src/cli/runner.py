"""
One training run from config to run directory

Shared by the train and sweep subcommands. Layout of a run directory:
manifest.json, metrics.csv, checkpoint.rvae, eval/test_ll.csv, eval/test_ll.json
"""

import os
from dataclasses import dataclass
from datetime import datetime
from typing import Dict, Optional

from src.cli.manifest import DatasetRef, RunManifest, utc_now, write_manifest
from src.core.evaluation import export_metrics
from src.core.trainer import Trainer, TrainConfig, TrainResult, prepare_datasets
from src.data.dataset import ImageDataset, NoiseMixSpec, load_idx
from src.utils.logger import logger


CLEAN_RATIO = 'clean'
EVAL_DIR = 'eval'
EVAL_FILE = 'test_ll.csv'

# Datasets already loaded by this process, keyed by path
_DATASETS: Dict[str, ImageDataset] = {}


@dataclass
class RunOutcome:
    run_dir: str
    manifest: RunManifest
    result: TrainResult

    @property
    def test_ll(self) -> Optional[float]:
        if not self.result.history:
            return None
        return self.result.history[-1].test_ll


def cached_dataset(path: str) -> ImageDataset:
    if path not in _DATASETS:
        _DATASETS[path] = load_idx(path)
    return _DATASETS[path]


def parse_ratio(text: Optional[str]) -> Optional[NoiseMixSpec]:
    """'R:S' -> NoiseMixSpec; None or 'clean' -> None"""
    if text is None or text.strip().lower() == CLEAN_RATIO:
        return None
    return NoiseMixSpec.parse(text)


def default_run_dir(out_dir: str, seed: int) -> str:
    """runs/<timestamp>_seed<N>"""
    stamp = datetime.now().strftime('%Y%m%d-%H%M%S')
    return os.path.join(out_dir, f"{stamp}_seed{seed}")


def execute_run(
    config: TrainConfig,
    train_images: str,
    test_images: Optional[str],
    run_dir: str,
    ratio: Optional[str] = None,
    mix_seed: Optional[int] = None
) -> RunOutcome:
    """
    Train one model and write every artifact of the run

    The manifest is written before the first epoch and rewritten with the
    finish time and output paths at the end.

    Args:
        config: Validated training configuration
        train_images: Training IDX file
        test_images: Test IDX file, or None to skip evaluation
        run_dir: Output directory (created if needed)
        ratio: original:noise proportion, 'clean' or None
        mix_seed: Seed of the mixing shuffle (defaults to config.seed)

    Returns:
        RunOutcome
    """
    mix_spec = parse_ratio(ratio)
    mix_seed = config.seed if mix_seed is None else mix_seed
    manifest = RunManifest(
        config=config.to_dict(),
        train_images=DatasetRef.of(train_images),
        test_images=DatasetRef.of(test_images) if test_images else None,
        ratio=str(mix_spec) if mix_spec is not None else None,
        mix_seed=mix_seed,
        seed=config.seed,
        started_at=utc_now(),
    )
    manifest_path = write_manifest(manifest, run_dir)
    logger.info(f"Run directory {run_dir} (manifest {manifest_path})")

    train_data, test_data = prepare_datasets(
        config,
        cached_dataset(train_images),
        cached_dataset(test_images) if test_images else None,
        mix_spec,
        mix_seed,
    )
    trainer = Trainer(config, train_data.dim)
    result = trainer.train(train_data, test_data, run_dir)

    outputs = {'metrics': result.metrics_path, 'checkpoint': result.checkpoint_path}
    if trainer.last_eval is not None:
        eval_dir = os.path.join(run_dir, EVAL_DIR)
        os.makedirs(eval_dir, exist_ok=True)
        eval_csv = os.path.join(eval_dir, EVAL_FILE)
        outputs['eval'] = eval_csv
        outputs['eval_summary'] = export_metrics(trainer.last_eval, eval_csv)

    manifest.outputs = {k: v for k, v in outputs.items() if v}
    manifest.finished_at = utc_now()
    write_manifest(manifest, run_dir)
    return RunOutcome(run_dir, manifest, result)

