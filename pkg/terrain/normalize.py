"""
Terrain height-offset removal and height-band cropping.
"""
from __future__ import annotations

import logging

import numpy as np

from clouds.pointcloud import PointCloud
from clouds.spatial import PlanarIndex

from .ground import GroundLabeling, PreprocessConfig, SurfaceEstimator, segment_ground

logger = logging.getLogger(__name__)


def _ground_elevation(distances: np.ndarray, ground_z: np.ndarray) -> float:
    """Inverse-square-distance weighted mean; coincident ground points are used directly."""
    coincident = distances == 0
    if coincident.any():
        return float(ground_z[coincident].mean())
    weights = 1.0 / (distances * distances)
    return float(np.dot(weights, ground_z) / weights.sum())


def normalize_height(cloud: PointCloud, labeling: GroundLabeling, cfg: PreprocessConfig) -> PointCloud:
    """
    Height of every non-ground point above its local terrain.

    The search radius starts at ``cfg.radius`` and grows by ``cfg.radius_step``
    per point until ground neighbours appear or ``cfg.radius_max`` is passed;
    points that never find ground are dropped. Output keeps input order.
    """
    non_ground = cloud.subset(labeling.non_ground)
    if len(non_ground) == 0:
        return PointCloud.empty()
    ground = cloud.subset(labeling.ground)
    index = PlanarIndex(ground)

    heights = np.full(len(non_ground), np.nan)
    pending = np.arange(len(non_ground))
    for radius in cfg.search_radii():
        if pending.size == 0:
            break
        still_pending = []
        for point, (neighbours, distances) in zip(pending, index.query_many(non_ground.xy[pending], radius)):
            if neighbours.size == 0:
                still_pending.append(point)
                continue
            heights[point] = non_ground.z[point] - _ground_elevation(distances, ground.z[neighbours])
        pending = np.asarray(still_pending, dtype=np.int64)

    if pending.size:
        logger.warning(f"Dropped {pending.size} non-ground points with no ground within {cfg.radius_max} m")
    keep = np.isfinite(heights)
    return non_ground.subset(keep).with_z(heights[keep])


def crop_band(cloud: PointCloud, z_lo: float, z_hi: float) -> PointCloud:
    """Points with z_lo <= z < z_hi."""
    return cloud.subset((cloud.z >= z_lo) & (cloud.z < z_hi))


def preprocess(cloud: PointCloud, cfg: PreprocessConfig, estimator: SurfaceEstimator | None = None) -> PointCloud:
    """Ground segmentation, height normalization, then cropping to the trunk band."""
    labeling = segment_ground(cloud, cfg, estimator)
    normalized = normalize_height(cloud, labeling, cfg)
    cropped = crop_band(normalized, cfg.z_lo, cfg.z_hi)
    logger.debug(f"Preprocess kept {len(cropped)} of {len(cloud)} points")
    return cropped
