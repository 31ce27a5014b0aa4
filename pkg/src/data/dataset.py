"""
Image datasets for robust VAE experiments
Loading, mean-intensity noise synthesis, ratio mixing, dynamic binarization
and deterministic minibatching
"""

import csv
import hashlib
import re
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Tuple, Union

import numpy as np

from src.core.numerics import STREAM_SHUFFLE, STREAM_TEST_BINARIZE, Matrix, Rng, make_rng
from src.data.idx import read_idx_images, write_idx_images
from src.utils.errors import ConfigurationError, DomainError
from src.utils.logger import logger


IMAGE_SIDE = 28
IMAGE_DIM = IMAGE_SIDE * IMAGE_SIDE

# Test sets are binarized once with this seed so scores are comparable across runs
EVAL_BINARIZATION_SEED = 20170301


class Provenance(IntEnum):
    """Where an example came from"""
    ORIGINAL = 0
    NOISE = 1


@dataclass
class ImageDataset:
    """
    N images flattened to rows of intensities in [0, 1]

    Attributes:
        pixels: N x dim float64 matrix
        provenance: N int8 flags (Provenance values)
        image_shape: (rows, cols) of one image
    """
    pixels: Matrix
    provenance: np.ndarray
    image_shape: Tuple[int, int] = (IMAGE_SIDE, IMAGE_SIDE)

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise DomainError(f"pixels must be N x dim, got shape {self.pixels.shape}")
        if self.provenance.shape != (self.pixels.shape[0],):
            raise DomainError(
                f"provenance has {self.provenance.shape[0]} flags for {self.pixels.shape[0]} images"
            )
        if self.image_shape[0] * self.image_shape[1] != self.pixels.shape[1]:
            raise DomainError(f"image shape {self.image_shape} does not match dim {self.pixels.shape[1]}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DomainError("pixel intensities must lie in [0, 1]")

    @property
    def count(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.pixels.shape[1])

    def noise_mask(self) -> np.ndarray:
        return self.provenance == Provenance.NOISE

    def count_of(self, provenance: Provenance) -> int:
        return int(np.sum(self.provenance == provenance))

    def take(self, indices: np.ndarray) -> 'ImageDataset':
        return ImageDataset(self.pixels[indices], self.provenance[indices], self.image_shape)

    def head(self, n: Optional[int]) -> 'ImageDataset':
        """First n examples (all when n is None)"""
        if n is None or n >= self.count:
            return self
        if n < 1:
            raise DomainError(f"subset size must be positive, got {n}")
        return self.take(np.arange(n))

    @classmethod
    def from_pixels(cls, pixels: Matrix, provenance: Provenance = Provenance.ORIGINAL,
                    image_shape: Optional[Tuple[int, int]] = None) -> 'ImageDataset':
        """Wrap a matrix of intensities, every example tagged with one provenance"""
        pixels = np.asarray(pixels, dtype=np.float64)
        if image_shape is None:
            image_shape = (IMAGE_SIDE, IMAGE_SIDE) if pixels.shape[1] == IMAGE_DIM else (1, pixels.shape[1])
        flags = np.full(pixels.shape[0], int(provenance), dtype=np.int8)
        return cls(pixels, flags, image_shape)


@dataclass(frozen=True)
class NoiseMixSpec:
    """original:noise proportion, e.g. 2:1"""
    ratio_original: int
    ratio_noise: int

    def __post_init__(self):
        if self.ratio_original < 1 or self.ratio_noise < 1:
            raise DomainError(f"ratio parts must be positive integers, got {self}")

    @classmethod
    def parse(cls, text: str) -> 'NoiseMixSpec':
        """Parse 'R:S'"""
        match = re.fullmatch(r'\s*(\d+)\s*:\s*(\d+)\s*', text)
        if not match:
            raise ConfigurationError(f"ratio must look like R:S, got '{text}'")
        return cls(int(match.group(1)), int(match.group(2)))

    def noise_count(self, original_count: int) -> int:
        """round-half-up(original_count * noise / original)"""
        return (2 * original_count * self.ratio_noise + self.ratio_original) // (2 * self.ratio_original)

    def __str__(self) -> str:
        return f"{self.ratio_original}:{self.ratio_noise}"


def load_idx(images_path: str) -> ImageDataset:
    """
    Load an IDX3 image file scaled into [0, 1]

    Args:
        images_path: Path to e.g. train-images-idx3-ubyte

    Returns:
        ImageDataset with every example marked original
    """
    raw = read_idx_images(images_path)
    count, rows, cols = raw.shape
    pixels = raw.reshape(count, rows * cols).astype(np.float64) / 255.0
    logger.info(f"Loaded {count} images of {rows}x{cols} from {images_path}")
    return ImageDataset(pixels, np.zeros(count, dtype=np.int8), (rows, cols))


def write_idx(dataset: ImageDataset, path: str):
    """
    Write intensities back as IDX3 bytes (round(255 * p))

    Noise images are quantized too, so a reloaded mixed file holds
    round(255 * m) / 255 rather than the exact mean intensity m.
    """
    rows, cols = dataset.image_shape
    raw = np.rint(dataset.pixels * 255.0).astype(np.uint8).reshape(dataset.count, rows, cols)
    write_idx_images(raw, path)


def export_mixed(dataset: ImageDataset, path: str) -> str:
    """
    Write a mixed dataset as IDX3 plus a provenance sidecar CSV

    Args:
        dataset: Dataset to export
        path: IDX output path; the sidecar is written next to it

    Returns:
        Sidecar path
    """
    noise = dataset.pixels[dataset.noise_mask()]
    if noise.size:
        logger.info(f"Noise intensity {noise[0, 0]:.6f} is stored as {np.rint(noise[0, 0] * 255.0):.0f}/255")
    write_idx(dataset, path)
    sidecar = f"{path}.provenance.csv"
    with open(sidecar, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['index', 'provenance'])
        for i, flag in enumerate(dataset.provenance):
            writer.writerow([i, Provenance(int(flag)).name.lower()])
    logger.info(f"Wrote {dataset.count} images to {path} (provenance in {sidecar})")
    return sidecar


def mean_intensity(d: ImageDataset) -> float:
    """Grand mean over every pixel of every image"""
    if d.count == 0:
        raise DomainError("mean intensity of an empty dataset")
    return float(np.mean(d.pixels))


def make_noise(m: float, count: int, image_shape: Tuple[int, int] = (IMAGE_SIDE, IMAGE_SIDE)) -> ImageDataset:
    """
    Constant images whose every pixel equals m

    Under dynamic binarization such images carry no structure: they are noise.
    """
    if not 0.0 <= m <= 1.0:
        raise DomainError(f"noise intensity must lie in [0, 1], got {m}")
    if count < 1:
        raise DomainError(f"noise count must be positive, got {count}")
    dim = image_shape[0] * image_shape[1]
    pixels = np.full((count, dim), m, dtype=np.float64)
    return ImageDataset(pixels, np.full(count, int(Provenance.NOISE), dtype=np.int8), image_shape)


def mix(original: ImageDataset, spec: NoiseMixSpec, rng: Rng) -> ImageDataset:
    """
    Add mean-intensity noise images in the proportion spec and shuffle

    Args:
        original: Clean dataset
        spec: original:noise proportion
        rng: Generator for the shuffle

    Returns:
        Shuffled union of original and noise images
    """
    if original.count == 0:
        raise DomainError("cannot mix noise into an empty dataset")
    count = spec.noise_count(original.count)
    if count == 0:
        logger.warning(f"{spec} of {original.count} originals rounds to no noise images")
        order = rng.permutation(original.count)
        return ImageDataset(original.pixels[order], original.provenance[order], original.image_shape)
    noise = make_noise(mean_intensity(original), count, original.image_shape)
    pixels = np.concatenate([original.pixels, noise.pixels])
    flags = np.concatenate([original.provenance, noise.provenance])
    order = rng.permutation(pixels.shape[0])
    logger.info(
        f"Mixed {original.count} originals with {noise.count} noise images ({spec}), "
        f"noise intensity {noise.pixels[0, 0]:.4f}"
    )
    return ImageDataset(pixels[order], flags[order], original.image_shape)


def binarize(batch: Matrix, rng: Rng) -> Matrix:
    """Each pixel independently 1 with probability equal to its intensity"""
    if batch.size and (batch.min() < 0.0 or batch.max() > 1.0):
        raise DomainError("binarize needs intensities in [0, 1]")
    return (rng.random(batch.shape) < batch).astype(np.float64)


def binarize_dataset(d: ImageDataset, seed: int = EVAL_BINARIZATION_SEED) -> ImageDataset:
    """One fixed binarization of a whole dataset (used for test sets)"""
    rng = make_rng(seed, STREAM_TEST_BINARIZE)
    return ImageDataset(binarize(d.pixels, rng), d.provenance.copy(), d.image_shape)


def minibatches(d: Union[ImageDataset, int], batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """
    Shuffled index batches derived only from (seed, epoch)

    Args:
        d: Dataset or number of examples
        batch_size: Batch size; the final short batch is kept

    Returns:
        List of index arrays covering every index once
    """
    if batch_size < 1:
        raise DomainError(f"batch size must be positive, got {batch_size}")
    count = d if isinstance(d, int) else d.count
    order = make_rng(seed, STREAM_SHUFFLE, epoch).permutation(count)
    return [order[start:start + batch_size] for start in range(0, count, batch_size)]


def file_checksum(path: str) -> str:
    """SHA-256 of a file, hex"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()
