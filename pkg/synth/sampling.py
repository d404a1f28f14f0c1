"""
Surface sampling of a forest scene and submap extraction along a looped
trajectory.

The scene surfaces are sampled once into a fixed world cloud; every point
carries a fixed uniform draw that decides whether a scan at a given range
keeps it. A revisit of the same pose therefore sees the same points, up to
per-visit noise. In seasonal mode each pass sees its own canopy sample.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from clouds.pointcloud import PointCloud, Pose, transform

from .scene import ForestScene

logger = logging.getLogger(__name__)

GROUND, UNDERSTORY, TRUNK, CANOPY = 0, 1, 2, 3


@dataclass(frozen=True, eq=False)
class SurfaceSample:
    points: np.ndarray
    layers: np.ndarray
    keep_draws: np.ndarray

    def select(self, mask) -> SurfaceSample:
        return SurfaceSample(self.points[mask], self.layers[mask], self.keep_draws[mask])


@dataclass(frozen=True)
class TrajectoryPoint:
    index: int
    visit: int
    pose: Pose
    timestamp: float


@dataclass(frozen=True, eq=False)
class SyntheticSubmap:
    id: str
    sequence: str
    timestamp: float
    pose: Pose
    visit: int
    cloud: PointCloud


def _disk(rng: np.random.Generator, count: int, half: float) -> np.ndarray:
    return rng.uniform(-half, half, (count, 2))


def _ground_layers(scene: ForestScene, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    p = scene.params
    area = p.extent ** 2
    half = p.extent / 2.0
    ground = _disk(rng, int(rng.poisson(p.ground_density * area)), half)
    ground_z = scene.terrain_height(ground[:, 0], ground[:, 1])
    under = _disk(rng, int(rng.poisson(p.understory_density * area)), half)
    under_z = scene.terrain_height(under[:, 0], under[:, 1]) + rng.uniform(0.0, 1.0, under.shape[0])
    points = np.vstack([np.column_stack([ground, ground_z]), np.column_stack([under, under_z])])
    layers = np.concatenate([np.full(ground.shape[0], GROUND), np.full(under.shape[0], UNDERSTORY)])
    return points, layers


def _trunk_layer(scene: ForestScene, rng: np.random.Generator) -> np.ndarray:
    p = scene.params
    blocks = []
    for x, y, radius, height, _ in scene.trees:
        count = int(rng.poisson(p.trunk_density * 2.0 * math.pi * radius * height))
        angle = rng.uniform(0.0, 2.0 * math.pi, count)
        z = rng.uniform(0.0, height, count) + scene.terrain_height(x, y)
        blocks.append(np.column_stack([x + radius * np.cos(angle), y + radius * np.sin(angle), z]))
    return np.vstack(blocks) if blocks else np.zeros((0, 3))


def _canopy_layer(scene: ForestScene, rng: np.random.Generator) -> np.ndarray:
    """Points on an ellipsoid per tree spanning canopy_base..height above the ground."""
    p = scene.params
    blocks = []
    for x, y, _, height, radius in scene.trees:
        vertical = (height - p.canopy_base) / 2.0
        area = 4.0 * math.pi * (radius * radius + 2.0 * radius * vertical) / 3.0
        count = int(rng.poisson(p.canopy_density * area))
        direction = rng.normal(size=(count, 3))
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
        centre_z = scene.terrain_height(x, y) + p.canopy_base + vertical
        blocks.append(np.column_stack([
            x + radius * direction[:, 0],
            y + radius * direction[:, 1],
            centre_z + vertical * direction[:, 2],
        ]))
    return np.vstack(blocks) if blocks else np.zeros((0, 3))


def sample_surfaces(scene: ForestScene, season: int = 0) -> SurfaceSample:
    """World cloud of every surface; ``season`` reseeds only the canopy."""
    static_rng = np.random.default_rng([scene.seed, 1])
    ground, ground_layers = _ground_layers(scene, static_rng)
    trunks = _trunk_layer(scene, static_rng)
    canopy = _canopy_layer(scene, np.random.default_rng([scene.seed, 2, season]))
    points = np.vstack([ground, trunks, canopy])
    layers = np.concatenate([ground_layers, np.full(trunks.shape[0], TRUNK), np.full(canopy.shape[0], CANOPY)])
    static_draws = np.random.default_rng([scene.seed, 3]).uniform(size=ground.shape[0] + trunks.shape[0])
    canopy_draws = np.random.default_rng([scene.seed, 4, season]).uniform(size=canopy.shape[0])
    return SurfaceSample(points, layers, np.concatenate([static_draws, canopy_draws]))


def build_trajectory(scene: ForestScene) -> list[TrajectoryPoint]:
    """
    A circular loop driven ``passes`` times, plus an optional reversed pass.

    Later passes are offset by at most ``revisit_offset`` meters; every pose
    gets a small random yaw.
    """
    p = scene.params
    stops = max(3, int(round(2.0 * math.pi * p.loop_radius / p.submap_spacing)))
    angles = 2.0 * math.pi * np.arange(stops) / stops
    visits = [angles] * p.passes + ([angles[::-1]] if p.reverse_pass else [])
    rng = np.random.default_rng([scene.seed, 5])
    points, index = [], 0
    for visit, visit_angles in enumerate(visits):
        for angle in visit_angles:
            x, y = p.loop_radius * math.cos(angle), p.loop_radius * math.sin(angle)
            if visit > 0 and p.revisit_offset > 0:
                radius = p.revisit_offset * math.sqrt(rng.uniform())
                direction = rng.uniform(0.0, 2.0 * math.pi)
                x, y = x + radius * math.cos(direction), y + radius * math.sin(direction)
            yaw = float(rng.normal(0.0, p.yaw_jitter)) if p.yaw_jitter > 0 else 0.0
            z = float(scene.terrain_height(x, y))
            points.append(TrajectoryPoint(index, visit, Pose.from_yaw(x, y, z, yaw), index * p.timestep))
            index += 1
    return points


def _in_blind_sector(local: np.ndarray, start_deg: float, width_deg: float) -> np.ndarray:
    azimuth = np.degrees(np.arctan2(local[:, 1], local[:, 0])) % 360.0
    return ((azimuth - start_deg) % 360.0) < width_deg


def sample_submap(scene: ForestScene, surfaces: SurfaceSample, stop: TrajectoryPoint,
                  sequence: str = 'synth') -> SyntheticSubmap:
    """The cloud seen from one trajectory stop, in the stop's local frame."""
    p = scene.params
    centre = stop.pose.translation[:2]
    planar = np.hypot(surfaces.points[:, 0] - centre[0], surfaces.points[:, 1] - centre[1])
    keep = planar <= p.submap_radius
    keep &= surfaces.keep_draws < 1.0 / (1.0 + (planar / p.range_scale) ** 2)
    local = transform(PointCloud(surfaces.points[keep]), stop.pose.inverse()).points
    if p.blind_sector_width > 0:
        local = local[~_in_blind_sector(local, p.blind_sector_start, p.blind_sector_width)]
    if p.noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, 6, stop.index])
        local = local + rng.normal(0.0, p.noise_sigma, local.shape)
    return SyntheticSubmap(
        id=f'{sequence}_{stop.index:04d}',
        sequence=sequence,
        timestamp=stop.timestamp,
        pose=stop.pose,
        visit=stop.visit,
        cloud=PointCloud(local),
    )


def sample_submaps(scene: ForestScene, trajectory=None, jobs: int = 1) -> list[SyntheticSubmap]:
    """Submaps for every trajectory stop; seeded per stop, so ``jobs`` does not change the output."""
    p = scene.params
    trajectory = build_trajectory(scene) if trajectory is None else list(trajectory)
    seasons = sorted({stop.visit if p.seasonal else 0 for stop in trajectory})
    surfaces = {season: sample_surfaces(scene, season) for season in seasons}

    def one(stop: TrajectoryPoint) -> SyntheticSubmap:
        sequence = f'synth-{stop.visit:02d}' if p.split_sequences else 'synth'
        return sample_submap(scene, surfaces[stop.visit if p.seasonal else 0], stop, sequence)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        submaps = list(pool.map(one, trajectory))
    logger.info(f"Sampled {len(submaps)} submaps over {len(seasons)} canopy season(s)")
    return submaps


def revisit_positives(submaps, radius: float = 3.0) -> set[tuple[str, str]]:
    """Unordered (first-pass, revisit) id pairs whose poses lie within ``radius``."""
    first = [s for s in submaps if s.visit == 0]
    later = [s for s in submaps if s.visit > 0]
    pairs = set()
    for a in first:
        for b in later:
            if np.linalg.norm(a.pose.translation - b.pose.translation) < radius:
                pairs.add(tuple(sorted((a.id, b.id))))
    return pairs
