"""
Planar (x-y) neighbour search over a point cloud.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from forestlpr.exceptions import ConfigError

from .pointcloud import PointCloud


def _padded(radius: float) -> float:
    # the tree uses its own rounding; over-fetch slightly, then apply the exact predicate
    return radius * (1.0 + 1e-9) + 1e-12


class PlanarIndex:
    """
    k-d tree over the x-y coordinates of a cloud; z is ignored.

    Built once, then safe for concurrent read-only queries. The neighbour
    predicate is strict: a point at exactly ``radius`` is not a neighbour.
    """

    def __init__(self, cloud: PointCloud):
        self.cloud = cloud
        self._xy = np.ascontiguousarray(cloud.xy)
        self._tree = cKDTree(self._xy) if len(cloud) else None

    def __len__(self) -> int:
        return len(self.cloud)

    def query(self, x: float, y: float, radius: float) -> tuple[np.ndarray, np.ndarray]:
        """Indices (ascending) and 2D distances of points strictly within ``radius``."""
        if not radius > 0:
            raise ConfigError(f"search radius must be > 0, got {radius!r}")
        if self._tree is None:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        candidates = np.asarray(sorted(self._tree.query_ball_point([x, y], r=_padded(radius))), dtype=np.int64)
        if candidates.size == 0:
            return candidates, np.zeros(0)
        offsets = self._xy[candidates] - np.array([x, y])
        distances = np.sqrt(offsets[:, 0] ** 2 + offsets[:, 1] ** 2)
        keep = distances < radius
        return candidates[keep], distances[keep]

    def query_many(self, xy: np.ndarray, radius: float) -> list[tuple[np.ndarray, np.ndarray]]:
        """``query`` for every row of an (m, 2) array."""
        if not radius > 0:
            raise ConfigError(f"search radius must be > 0, got {radius!r}")
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        if self._tree is None:
            empty = (np.zeros(0, dtype=np.int64), np.zeros(0))
            return [empty for _ in range(xy.shape[0])]
        results = []
        for (qx, qy), candidates in zip(xy, self._tree.query_ball_point(xy, r=_padded(radius))):
            candidates = np.asarray(sorted(candidates), dtype=np.int64)
            if candidates.size == 0:
                results.append((candidates, np.zeros(0)))
                continue
            offsets = self._xy[candidates] - np.array([qx, qy])
            distances = np.sqrt(offsets[:, 0] ** 2 + offsets[:, 1] ** 2)
            keep = distances < radius
            results.append((candidates[keep], distances[keep]))
        return results


def radius_neighbors_2d(cloud_or_index, query, radius: float) -> list[tuple[int, float]]:
    """
    (index, distance) pairs of points whose x-y distance to ``query`` is < radius.

    Accepts either a prebuilt PlanarIndex or a PointCloud (an index is built on
    the fly). Only the first two coordinates of ``query`` are used.
    """
    index = cloud_or_index if isinstance(cloud_or_index, PlanarIndex) else PlanarIndex(cloud_or_index)
    indices, distances = index.query(float(query[0]), float(query[1]), radius)
    return [(int(i), float(d)) for i, d in zip(indices, distances)]
