"""
Descriptor file: b"FLPR-D", u32 version, u32 count, u32 dim, then count x dim
little-endian float32. Row ids live in a JSON-lines sidecar next to it.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from datasets.io import atomic_write, atomic_write_text
from forestlpr.exceptions import DatasetError, ModelFormatError

MAGIC = b'FLPR-D'
VERSION = 1
_HEADER = struct.Struct('<III')


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + '.ids.jsonl')


def save_descriptors(path, ids, matrix) -> Path:
    """Write descriptors and their row -> submap id sidecar."""
    matrix = np.asarray(matrix, dtype=np.float64)
    ids = list(ids)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DatasetError(f"{len(ids)} ids for a descriptor matrix of shape {matrix.shape}")
    payload = MAGIC + _HEADER.pack(VERSION, matrix.shape[0], matrix.shape[1]) + matrix.astype('<f4').tobytes()
    atomic_write_text(sidecar_path(path), ''.join(json.dumps({'row': i, 'id': sid}) + '\n' for i, sid in enumerate(ids)))
    return atomic_write(path, payload)


def load_descriptors(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"descriptor file {path} does not exist")
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path} is not a descriptor file (bad magic)")
    if len(raw) < len(MAGIC) + _HEADER.size:
        raise ModelFormatError(f"{path} is truncated inside its header")
    version, count, dim = _HEADER.unpack_from(raw, len(MAGIC))
    if version != VERSION:
        raise ModelFormatError(f"unsupported descriptor file version {version} (this build reads version {VERSION})")
    body = raw[len(MAGIC) + _HEADER.size:]
    if len(body) != count * dim * 4:
        raise ModelFormatError(f"{path} holds {len(body)} data bytes, expected {count * dim * 4}")
    matrix = np.frombuffer(body, dtype='<f4').reshape(count, dim).astype(np.float64)

    sidecar = sidecar_path(path)
    if not sidecar.exists():
        raise DatasetError(f"descriptor id sidecar {sidecar} does not exist")
    ids = [None] * count
    for line in sidecar.read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        row = int(entry['row'])
        if not 0 <= row < count:
            raise DatasetError(f"sidecar row {row} outside 0..{count - 1}")
        ids[row] = str(entry['id'])
    if any(sid is None for sid in ids):
        raise DatasetError(f"sidecar {sidecar} does not name every descriptor row")
    return ids, matrix
