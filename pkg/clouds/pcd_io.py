"""
PCD v0.7 reader/writer and pose-file I/O.

Only the x, y, z fields are kept; other fields are parsed past and ignored.
"""
from __future__ import annotations

import logging
import re
from pathlib import Path

import numpy as np

from datasets.io import atomic_write
from forestlpr.exceptions import DatasetError, PCDFormatError

from .pointcloud import PointCloud, Pose

logger = logging.getLogger(__name__)

pcd_type_to_numpy_type = {
    ('F', 4): 'f4', ('F', 8): 'f8',
    ('U', 1): 'u1', ('U', 2): 'u2', ('U', 4): 'u4', ('U', 8): 'u8',
    ('I', 1): 'i1', ('I', 2): 'i2', ('I', 4): 'i4', ('I', 8): 'i8',
}


def parse_header(lines):
    """
    Parse the header lines of a PCD file into a metadata dict.

    Raises PCDFormatError naming the first line that cannot be understood.
    """
    metadata = {}
    for ln in lines:
        if ln.startswith('#') or not ln.strip():
            continue
        match = re.match(r'(\w+)\s+(.*\S)\s*$', ln)
        if not match:
            raise PCDFormatError("malformed PCD header", line=ln)
        key, value = match.group(1).lower(), match.group(2)
        try:
            if key == 'version':
                metadata[key] = value
            elif key in ('fields', 'type'):
                metadata[key] = value.split()
            elif key in ('size', 'count'):
                metadata[key] = [int(v) for v in value.split()]
            elif key in ('width', 'height', 'points'):
                metadata[key] = int(value)
            elif key == 'viewpoint':
                metadata[key] = [float(v) for v in value.split()]
            elif key == 'data':
                metadata[key] = value.strip().lower()
            else:
                raise PCDFormatError(f"unknown PCD header key {key!r}", line=ln)
        except ValueError:
            raise PCDFormatError(f"bad value for PCD header key {key!r}", line=ln) from None

    for required in ('fields', 'size', 'type', 'points', 'data'):
        if required not in metadata:
            raise PCDFormatError(f"PCD header is missing {required.upper()}")
    fields = metadata['fields']
    metadata.setdefault('count', [1] * len(fields))
    for key in ('size', 'type', 'count'):
        if len(metadata[key]) != len(fields):
            raise PCDFormatError(f"PCD header {key.upper()} has {len(metadata[key])} entries for {len(fields)} fields")
    if not {'x', 'y', 'z'} <= set(fields):
        raise PCDFormatError("PCD FIELDS must include x y z", line='FIELDS ' + ' '.join(fields))
    if metadata['points'] < 0:
        raise PCDFormatError("PCD POINTS must be non-negative", line=f"POINTS {metadata['points']}")
    return metadata


def _build_dtype(metadata) -> np.dtype:
    """Little-endian structured dtype matching the declared fields."""
    names, formats = [], []
    for name, kind, size, count in zip(metadata['fields'], metadata['type'], metadata['size'], metadata['count']):
        base = pcd_type_to_numpy_type.get((kind.upper(), size))
        if base is None:
            raise PCDFormatError(f"unsupported PCD field type {kind}{size} for field {name!r}")
        names.append(name if name != '_' else f'_pad{len(names)}')
        formats.append('<' + base if count == 1 else ('<' + base, (count,)))
    return np.dtype(list(zip(names, formats)))


def _split_header(raw: bytes) -> tuple[list[str], int]:
    """Header lines up to and including DATA, plus the byte offset of the body."""
    lines, offset = [], 0
    while offset < len(raw):
        end = raw.find(b'\n', offset)
        end = len(raw) if end < 0 else end
        line = raw[offset:end].decode('ascii', errors='replace').rstrip('\r')
        offset = end + 1
        lines.append(line)
        if line.lower().startswith('data'):
            return lines, offset
    raise PCDFormatError("PCD header has no DATA line")


def read_pcd(path) -> tuple[PointCloud, int]:
    """Load a PCD file; returns the cloud and the number of dropped NaN rows."""
    raw = Path(path).read_bytes()
    header_lines, body_offset = _split_header(raw)
    metadata = parse_header(header_lines)
    encoding = metadata['data']
    dtype = _build_dtype(metadata)
    n_points = metadata['points']

    if encoding == 'ascii':
        rows = [ln for ln in raw[body_offset:].decode('ascii', errors='replace').splitlines() if ln.strip()]
        if len(rows) != n_points:
            raise PCDFormatError(f"PCD declares POINTS {n_points} but contains {len(rows)} rows")
        n_columns = sum(metadata['count'])
        columns = _field_columns(metadata)
        xyz = np.empty((n_points, 3))
        for i, row in enumerate(rows):
            values = row.split()
            if len(values) != n_columns:
                raise PCDFormatError(f"PCD row {i} has {len(values)} values, expected {n_columns}", line=row)
            try:
                xyz[i] = [float(values[columns[axis]]) for axis in ('x', 'y', 'z')]
            except ValueError:
                raise PCDFormatError(f"PCD row {i} is not numeric", line=row) from None
    elif encoding == 'binary':
        body = raw[body_offset:]
        expected = dtype.itemsize * n_points
        if len(body) < expected:
            raise PCDFormatError(f"PCD declares POINTS {n_points} but binary body holds {len(body) // dtype.itemsize}")
        records = np.frombuffer(body[:expected], dtype=dtype, count=n_points)
        xyz = np.column_stack([records[axis].astype(np.float64) for axis in ('x', 'y', 'z')])
    else:
        raise PCDFormatError(f"unsupported PCD DATA encoding {encoding!r}", line=f"DATA {encoding}")

    finite = np.all(np.isfinite(xyz), axis=1)
    dropped = int(n_points - finite.sum())
    if dropped:
        logger.warning(f"Dropped {dropped} NaN/Inf rows from {path}")
    return PointCloud(xyz[finite]), dropped


def _field_columns(metadata) -> dict[str, int]:
    columns, position = {}, 0
    for name, count in zip(metadata['fields'], metadata['count']):
        columns[name] = position
        position += count
    return columns


def load_pcd(path) -> PointCloud:
    """Load the x y z columns of a PCD file, dropping non-finite rows."""
    cloud, _ = read_pcd(path)
    return cloud


def pcd_bytes(cloud: PointCloud, binary: bool = True) -> bytes:
    n = len(cloud)
    header = (
        '# .PCD v0.7 - Point Cloud Data file format\n'
        'VERSION 0.7\n'
        'FIELDS x y z\n'
        'SIZE 4 4 4\n'
        'TYPE F F F\n'
        'COUNT 1 1 1\n'
        f'WIDTH {n}\n'
        'HEIGHT 1\n'
        'VIEWPOINT 0 0 0 1 0 0 0\n'
        f'POINTS {n}\n'
        f"DATA {'binary' if binary else 'ascii'}\n"
    ).encode('ascii')
    values = cloud.points.astype('<f4')
    if binary:
        return header + values.tobytes()
    body = ''.join(f'{x:.9g} {y:.9g} {z:.9g}\n' for x, y, z in values.astype(np.float64))
    return header + body.encode('ascii')


def save_pcd(cloud: PointCloud, path, binary: bool = True) -> Path:
    """Write a cloud as PCD v0.7 (float32 x y z)."""
    return atomic_write(path, pcd_bytes(cloud, binary=binary))


def load_poses(path) -> list[tuple[float, Pose]]:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines."""
    poses = []
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith('#'):
            continue
        values = line.replace(',', ' ').split()
        if len(values) != 8:
            raise DatasetError(f"{path}:{number}: expected 8 values, got {len(values)}")
        try:
            numbers = [float(v) for v in values]
        except ValueError:
            raise DatasetError(f"{path}:{number}: non-numeric pose line") from None
        poses.append((numbers[0], Pose.from_components(*numbers[1:])))
    return poses


def save_poses(poses, path) -> Path:
    lines = [' '.join(repr(v) for v in (float(ts), *pose.as_components())) for ts, pose in poses]
    return atomic_write(path, ('\n'.join(lines) + '\n').encode('ascii'))
