"""
BEV image dumps: 16-bit PGM for viewing and raw float32 for exact reloads.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from datasets.io import atomic_write
from forestlpr.exceptions import ModelFormatError

from .raster import BevStack, DensityImage

RAW_HEADER = struct.Struct('<II')


def pgm_bytes(image: DensityImage) -> bytes:
    """P5 PGM, maxval 65535, pixel = round(I * 65535)."""
    levels = np.rint(np.clip(image.values, 0.0, 1.0) * 65535.0).astype(np.int32)
    buffer = io.BytesIO()
    Image.fromarray(levels).save(buffer, format='PPM')
    return buffer.getvalue()


def raw_bytes(image: DensityImage) -> bytes:
    """u32 width, u32 height, then row-major little-endian float32 values."""
    height, width = image.shape
    return RAW_HEADER.pack(width, height) + image.values.astype('<f4').tobytes()


def read_raw(path, res: float, extent: float) -> DensityImage:
    data = Path(path).read_bytes()
    if len(data) < RAW_HEADER.size:
        raise ModelFormatError(f"{path}: raw BEV file is truncated")
    width, height = RAW_HEADER.unpack_from(data)
    body = data[RAW_HEADER.size:]
    if len(body) != 4 * width * height:
        raise ModelFormatError(f"{path}: raw BEV body holds {len(body)} bytes, expected {4 * width * height}")
    values = np.frombuffer(body, dtype='<f4').reshape(height, width).astype(np.float64)
    return DensityImage(values, res=res, extent=extent)


def stack_paths(out_dir, stem: str, slices: int, pgm: bool = True) -> list[Path]:
    """``<stem>_s<j>.f32`` (and ``.pgm``) for every slice, in write order."""
    suffixes = ('.f32', '.pgm') if pgm else ('.f32',)
    return [Path(out_dir) / f'{stem}_s{j}{suffix}' for j in range(slices) for suffix in suffixes]


def write_stack(stack: BevStack, out_dir, stem: str, pgm: bool = True) -> list[Path]:
    """One raw (and optionally one PGM) file per slice."""
    paths = iter(stack_paths(out_dir, stem, len(stack.images), pgm))
    written = []
    for image in stack.images:
        written.append(atomic_write(next(paths), raw_bytes(image)))
        if pgm:
            written.append(atomic_write(next(paths), pgm_bytes(image)))
    return written
