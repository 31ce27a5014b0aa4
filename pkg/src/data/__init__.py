"""Dataset package: IDX files, noise mixing and binarization"""

from .dataset import (
    ImageDataset,
    NoiseMixSpec,
    Provenance,
    binarize,
    binarize_dataset,
    export_mixed,
    load_idx,
    make_noise,
    minibatches,
    mix,
)

__all__ = [
    'ImageDataset',
    'NoiseMixSpec',
    'Provenance',
    'binarize',
    'binarize_dataset',
    'export_mixed',
    'load_idx',
    'make_noise',
    'minibatches',
    'mix',
]
