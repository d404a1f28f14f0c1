"""
Ground segmentation against an estimated terrain surface.

The surface estimator is pluggable: anything with a ``fit(cloud)`` method
returning an object with ``height_at(xy)`` can replace the default grid
estimator (e.g. a cloth-simulation filter).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from clouds.pointcloud import PointCloud
from forestlpr.exceptions import ConfigError, DegenerateInputError

logger = logging.getLogger(__name__)

MIN_POINTS = 4


@dataclass(frozen=True)
class PreprocessConfig:
    ground_cell: float = 0.3
    ground_tolerance: float = 0.2
    radius: float = 3.0
    radius_step: float = 1.0
    radius_max: float = 10.0
    z_lo: float = 1.0
    z_hi: float = 6.0

    def __post_init__(self):
        if not self.ground_cell > 0:
            raise ConfigError("preprocess.ground_cell must be > 0")
        if not self.ground_tolerance >= 0:
            raise ConfigError("preprocess.ground_tolerance must be >= 0")
        if not 0 < self.radius <= self.radius_max:
            raise ConfigError("preprocess.radius must satisfy 0 < radius <= radius_max")
        if not self.radius_step > 0:
            raise ConfigError("preprocess.radius_step must be > 0")
        if not self.z_lo < self.z_hi:
            raise ConfigError("preprocess.z_lo must be < preprocess.z_hi")

    def search_radii(self) -> list[float]:
        """R, R+dR, ... up to and including R_max."""
        radii, k = [], 0
        while True:
            r = self.radius + k * self.radius_step
            if r > self.radius_max + 1e-9:
                return radii
            radii.append(r)
            k += 1


@dataclass(frozen=True, eq=False)
class GroundLabeling:
    """Disjoint partition of cloud indices into ground and non-ground."""

    ground: np.ndarray
    non_ground: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'ground', np.asarray(self.ground, dtype=np.int64))
        object.__setattr__(self, 'non_ground', np.asarray(self.non_ground, dtype=np.int64))
        if np.intersect1d(self.ground, self.non_ground).size:
            raise ConfigError("ground and non-ground index sets overlap")

    @classmethod
    def from_mask(cls, is_ground: np.ndarray) -> GroundLabeling:
        return cls(np.flatnonzero(is_ground), np.flatnonzero(~is_ground))


class GroundSurface(Protocol):
    def height_at(self, xy: np.ndarray) -> np.ndarray: ...


class SurfaceEstimator(Protocol):
    def fit(self, cloud: PointCloud) -> GroundSurface: ...


@dataclass(frozen=True, eq=False)
class GridSurface:
    """Terrain heights sampled at cell centers, bilinearly interpolated in between."""

    origin: tuple[float, float]
    cell: float
    heights: np.ndarray

    def height_at(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        rows = (xy[:, 0] - self.origin[0]) / self.cell - 0.5
        cols = (xy[:, 1] - self.origin[1]) / self.cell - 0.5
        return ndimage.map_coordinates(self.heights, [rows, cols], order=1, mode='nearest')


class GridMinimumEstimator:
    """
    Per-cell minimum height, empty cells filled from the nearest populated
    cell, then smoothed with a 3x3 median.
    """

    def __init__(self, cell: float = 0.3):
        self.cell = cell

    def fit(self, cloud: PointCloud) -> GridSurface:
        x0, y0 = cloud.x.min(), cloud.y.min()
        i = np.floor((cloud.x - x0) / self.cell).astype(np.int64)
        j = np.floor((cloud.y - y0) / self.cell).astype(np.int64)
        shape = (int(i.max()) + 1, int(j.max()) + 1)

        minimum = np.full(shape, np.inf)
        np.minimum.at(minimum, (i, j), cloud.z)
        empty = ~np.isfinite(minimum)
        if empty.any():
            _, (ni, nj) = ndimage.distance_transform_edt(empty, return_distances=True, return_indices=True)
            minimum = minimum[ni, nj]
        smoothed = ndimage.median_filter(minimum, size=3, mode='nearest')
        return GridSurface(origin=(float(x0), float(y0)), cell=self.cell, heights=smoothed)


def segment_ground(cloud: PointCloud, cfg: PreprocessConfig, estimator: SurfaceEstimator | None = None) -> GroundLabeling:
    """Label every point within the vertical tolerance of the terrain surface as ground."""
    if len(cloud) < MIN_POINTS:
        raise DegenerateInputError(f"ground segmentation needs at least {MIN_POINTS} points, got {len(cloud)}")
    estimator = estimator or GridMinimumEstimator(cfg.ground_cell)
    surface = estimator.fit(cloud)
    residual = cloud.z - surface.height_at(cloud.xy)
    labeling = GroundLabeling.from_mask(np.abs(residual) <= cfg.ground_tolerance)
    logger.debug(f"Ground segmentation: {labeling.ground.size} ground / {labeling.non_ground.size} non-ground")
    return labeling
