"""
IDX3 image container reader and writer

Layout (big-endian): u32 magic 0x00000803 | u32 count | u32 rows | u32 cols | u8 pixels
"""

import struct

import numpy as np

from src.utils.errors import FormatError, IdxLengthError
from src.utils.logger import logger


IDX3_UBYTE_MAGIC = 0x00000803
_HEADER = struct.Struct('>IIII')


def read_idx_images(path: str):
    """
    Read an IDX3 unsigned-byte image tensor

    Args:
        path: IDX file path

    Returns:
        uint8 array of shape count x rows x cols
    """
    with open(path, 'rb') as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise IdxLengthError(f"{path}: file is {len(blob)} bytes, header needs {_HEADER.size}")
    magic, count, rows, cols = _HEADER.unpack_from(blob, 0)
    if magic != IDX3_UBYTE_MAGIC:
        raise FormatError(
            f"{path}: magic number at offset 0 is 0x{magic:08x}, expected 0x{IDX3_UBYTE_MAGIC:08x}"
        )
    expected = count * rows * cols
    available = len(blob) - _HEADER.size
    if available < expected:
        raise IdxLengthError(
            f"{path}: header promises {count}x{rows}x{cols} = {expected} pixel bytes, found {available}"
        )
    if available > expected:
        logger.warning(f"{path}: ignoring {available - expected} trailing bytes")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=_HEADER.size)
    return pixels.reshape(count, rows, cols)


def write_idx_images(images: np.ndarray, path: str):
    """
    Write a count x rows x cols uint8 tensor as IDX3

    Args:
        images: uint8 array
        path: Output file
    """
    if images.ndim != 3 or images.dtype != np.uint8:
        raise FormatError(f"{path}: IDX3 needs a 3-D uint8 array, got {images.dtype} {images.shape}")
    count, rows, cols = images.shape
    with open(path, 'wb') as f:
        f.write(_HEADER.pack(IDX3_UBYTE_MAGIC, count, rows, cols))
        f.write(np.ascontiguousarray(images).tobytes())
