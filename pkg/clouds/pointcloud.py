"""
Point-cloud container, rigid poses and voxel occupancy.

Every structure here is immutable after construction so it can be shared
between worker threads without copying.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from forestlpr.exceptions import ConfigError, DatasetError

logger = logging.getLogger(__name__)

QUATERNION_TOLERANCE = 1e-9

# 21 bits per axis when packing voxel coordinates into one int64 key
_PACK_BITS = 21
_PACK_OFFSET = 1 << (_PACK_BITS - 1)
_PACK_MASK = (1 << _PACK_BITS) - 1


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered set of 3D points in meters, stored as an (n, 3) float64 array."""

    points: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise DatasetError("point cloud contains non-finite coordinates")
        object.__setattr__(self, 'points', _frozen(points))

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.zeros((0, 3)))

    @classmethod
    def from_xyz(cls, x, y, z) -> PointCloud:
        return cls(np.column_stack([np.asarray(x, float), np.asarray(y, float), np.asarray(z, float)]))

    @classmethod
    def concatenate(cls, clouds: Iterable[PointCloud]) -> PointCloud:
        arrays = [c.points for c in clouds]
        if not arrays:
            return cls.empty()
        return cls(np.concatenate(arrays, axis=0))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.points[:, 2]

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    def subset(self, selector) -> PointCloud:
        """Cloud restricted to a boolean mask or an index array, order preserved."""
        return PointCloud(self.points[selector])

    def with_z(self, z) -> PointCloud:
        """Same x-y positions with the height column replaced."""
        points = self.points.copy()
        points[:, 2] = z
        return PointCloud(points)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: active rotation by a unit quaternion (w, x, y, z), then translation."""

    translation: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        rotation = np.array(self.rotation, dtype=np.float64).reshape(4)
        if not (np.all(np.isfinite(translation)) and np.all(np.isfinite(rotation))):
            raise DatasetError("pose contains non-finite values")
        if abs(np.linalg.norm(rotation) - 1.0) > QUATERNION_TOLERANCE:
            raise DatasetError(f"pose quaternion is not unit length: |q|={np.linalg.norm(rotation)!r}")
        object.__setattr__(self, 'translation', _frozen(translation))
        object.__setattr__(self, 'rotation', _frozen(rotation))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.zeros(3))

    @classmethod
    def from_components(cls, tx, ty, tz, qx, qy, qz, qw) -> Pose:
        """Build a pose from pose-file column order, renormalizing the quaternion."""
        q = np.array([qw, qx, qy, qz], dtype=np.float64)
        norm = np.linalg.norm(q)
        if norm == 0 or not np.isfinite(norm):
            raise DatasetError("pose quaternion has zero or non-finite norm")
        return cls(np.array([tx, ty, tz], dtype=np.float64), q / norm)

    @classmethod
    def from_yaw(cls, x: float, y: float, z: float, yaw: float) -> Pose:
        half = 0.5 * yaw
        return cls(np.array([x, y, z]), np.array([np.cos(half), 0.0, 0.0, np.sin(half)]))

    @property
    def yaw(self) -> float:
        w, x, y, z = self.rotation
        return float(np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def inverse(self) -> Pose:
        w, x, y, z = self.rotation
        conjugate = np.array([w, -x, -y, -z])
        inverse_rotation = Pose(np.zeros(3), conjugate).rotation_matrix()
        return Pose(-inverse_rotation @ self.translation, conjugate)

    def as_components(self) -> tuple[float, ...]:
        """(tx, ty, tz, qx, qy, qz, qw), the pose-file and manifest column order."""
        w, x, y, z = self.rotation
        tx, ty, tz = self.translation
        return (float(tx), float(ty), float(tz), float(x), float(y), float(z), float(w))


def rotate_z(cloud: PointCloud, angle: float) -> PointCloud:
    """Rotate every point about the z axis by ``angle`` radians."""
    if not np.isfinite(angle):
        raise ConfigError(f"rotation angle must be finite, got {angle!r}")
    c, s = np.cos(angle), np.sin(angle)
    points = cloud.points
    rotated = np.column_stack([
        points[:, 0] * c - points[:, 1] * s,
        points[:, 0] * s + points[:, 1] * c,
        points[:, 2],
    ])
    return PointCloud(rotated)


def transform(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Map p -> R p + t."""
    if len(cloud) == 0:
        return cloud
    return PointCloud(cloud.points @ pose.rotation_matrix().T + pose.translation)


def _unique_rows(cells: np.ndarray) -> np.ndarray:
    if cells.shape[0] == 0:
        return cells
    return np.unique(cells, axis=0)


def _pack(cells: np.ndarray) -> np.ndarray:
    shifted = cells + _PACK_OFFSET
    return (shifted[:, 0] << (2 * _PACK_BITS)) | (shifted[:, 1] << _PACK_BITS) | shifted[:, 2]


@dataclass(frozen=True, eq=False)
class VoxelSet:
    """
    Occupied voxel cells of a cloud with an octree-style hierarchy.

    ``levels[k]`` holds the sorted packed keys of the cells coarsened k times
    (each coarsening halves the resolution, i.e. an octree parent), so set
    intersections can prune whole subtrees before touching leaf cells.
    """

    edge: float
    cells: np.ndarray
    levels: tuple = ()

    DEPTH = 6

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 3)
        if cells.size and (cells.min() < -_PACK_OFFSET or cells.max() >= _PACK_OFFSET):
            raise ConfigError("voxel coordinates exceed the packable range; use a larger edge")
        cells = _unique_rows(cells)
        coords = [cells]
        for _ in range(1, self.DEPTH):
            coords.append(_unique_rows(coords[-1] >> 1))
        object.__setattr__(self, 'cells', _frozen(cells))
        object.__setattr__(self, 'levels', tuple(_frozen(np.sort(_pack(c))) for c in coords))
        object.__setattr__(self, '_coords', tuple(coords))

    def __len__(self) -> int:
        return self.cells.shape[0]

    def cell_set(self) -> set[tuple[int, int, int]]:
        return {tuple(int(v) for v in row) for row in self.cells}

    def intersection_size(self, other: VoxelSet) -> int:
        """Number of shared leaf cells, descending the hierarchy from the root level."""
        if len(self) == 0 or len(other) == 0:
            return 0
        top = self.DEPTH - 1
        common = np.intersect1d(self.levels[top], other.levels[top], assume_unique=True)
        for level in range(top - 1, -1, -1):
            if common.size == 0:
                return 0
            mine = self._children_under(level, common)
            theirs = other._children_under(level, common)
            common = np.intersect1d(mine, theirs, assume_unique=True)
        return int(common.size)

    def _children_under(self, level: int, parents: np.ndarray) -> np.ndarray:
        coords = self._coords[level]
        keep = np.isin(_pack(coords >> 1), parents, assume_unique=False)
        return _pack(coords[keep])


def voxelize(cloud: PointCloud, edge: float) -> VoxelSet:
    """Occupied cells (floor(x/edge), floor(y/edge), floor(z/edge))."""
    if not edge > 0:
        raise ConfigError(f"voxel edge must be > 0, got {edge!r}")
    cells = np.floor(cloud.points / edge).astype(np.int64)
    return VoxelSet(edge=float(edge), cells=cells)
