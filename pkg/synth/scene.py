"""
Seeded synthetic forest: a sinusoidal terrain, non-overlapping trees with
canopy blobs, and low understory.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from forestlpr.exceptions import ConfigError

logger = logging.getLogger(__name__)

MAX_WAVES = 5
MAX_AMPLITUDE = 2.0

SCENE_PRESETS = {
    'dense': {'tree_density': 0.02, 'tree_height_min': 8.0, 'tree_height_max': 20.0, 'canopy_base': 5.0},
    'sparse': {'tree_density': 0.005, 'tree_height_min': 5.0, 'tree_height_max': 10.0, 'canopy_base': 3.0},
}


@dataclass(frozen=True)
class SynthParams:
    extent: float = 200.0
    tree_density: float = 0.02
    trunk_radius_min: float = 0.1
    trunk_radius_max: float = 0.4
    tree_height_min: float = 8.0
    tree_height_max: float = 20.0
    canopy_base: float = 5.0
    canopy_radius_min: float = 1.5
    canopy_radius_max: float = 4.0
    terrain_waves: int = 3
    terrain_amplitude: float = 2.0
    ground_density: float = 2.0
    understory_density: float = 0.5
    trunk_density: float = 20.0
    canopy_density: float = 4.0
    loop_radius: float = 60.0
    submap_spacing: float = 5.0
    submap_radius: float = 30.0
    range_scale: float = 20.0
    timestep: float = 10.0
    passes: int = 2
    reverse_pass: bool = True
    revisit_offset: float = 1.0
    yaw_jitter: float = 0.05
    noise_sigma: float = 0.02
    seasonal: bool = False
    blind_sector_width: float = 0.0
    blind_sector_start: float = 180.0
    split_sequences: bool = False

    def __post_init__(self):
        positive = ('extent', 'loop_radius', 'submap_spacing', 'submap_radius', 'range_scale', 'timestep',
                    'trunk_radius_min', 'tree_height_min', 'canopy_radius_min')
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"synth.{name} must be > 0")
        non_negative = ('tree_density', 'terrain_amplitude', 'ground_density', 'understory_density',
                        'trunk_density', 'canopy_density', 'revisit_offset', 'yaw_jitter', 'noise_sigma')
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f"synth.{name} must be >= 0")
        if not 0 <= self.terrain_waves <= MAX_WAVES:
            raise ConfigError(f"synth.terrain_waves must be in 0..{MAX_WAVES}")
        if self.terrain_amplitude > MAX_AMPLITUDE:
            raise ConfigError(f"synth.terrain_amplitude must be <= {MAX_AMPLITUDE}")
        if self.trunk_radius_min > self.trunk_radius_max:
            raise ConfigError("synth.trunk_radius_min must be <= trunk_radius_max")
        if self.tree_height_min > self.tree_height_max:
            raise ConfigError("synth.tree_height_min must be <= tree_height_max")
        if self.canopy_radius_min > self.canopy_radius_max:
            raise ConfigError("synth.canopy_radius_min must be <= canopy_radius_max")
        if not 0 < self.canopy_base < self.tree_height_min:
            raise ConfigError("synth.canopy_base must be in (0, tree_height_min)")
        if self.loop_radius + self.submap_radius > self.extent / 2:
            raise ConfigError("synth loop plus submap radius must fit inside the scene")
        if self.passes < 1:
            raise ConfigError("synth.passes must be >= 1")
        if not 0 <= self.blind_sector_width < 360:
            raise ConfigError("synth.blind_sector_width must be in [0, 360) degrees")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> SynthParams:
        try:
            values = dict(SCENE_PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown synth preset {name!r}") from None
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ForestScene:
    """
    Terrain waves (amplitude, kx, ky, phase) and trees
    (x, y, trunk radius, height, canopy radius), both as float arrays.
    """

    seed: int
    params: SynthParams
    waves: np.ndarray
    trees: np.ndarray

    @property
    def tree_count(self) -> int:
        return self.trees.shape[0]

    def terrain_height(self, x, y) -> np.ndarray:
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        z = np.zeros(np.broadcast(x, y).shape)
        for amplitude, kx, ky, phase in self.waves:
            z = z + amplitude * np.sin(kx * x + ky * y + phase)
        return z


def _terrain_waves(rng: np.random.Generator, params: SynthParams) -> np.ndarray:
    n = params.terrain_waves
    if n == 0:
        return np.zeros((0, 4))
    weights = rng.uniform(0.2, 1.0, n)
    amplitudes = params.terrain_amplitude * weights / weights.sum()
    wavelengths = rng.uniform(40.0, 200.0, n)
    directions = rng.uniform(0.0, 2.0 * math.pi, n)
    k = 2.0 * math.pi / wavelengths
    phases = rng.uniform(0.0, 2.0 * math.pi, n)
    return np.column_stack([amplitudes, k * np.cos(directions), k * np.sin(directions), phases])


def _place_trees(rng: np.random.Generator, params: SynthParams, count: int, max_tries: int = 50) -> np.ndarray:
    """Uniform positions, redrawing any trunk that would overlap an accepted one."""
    half = params.extent / 2.0
    radii = rng.uniform(params.trunk_radius_min, params.trunk_radius_max, count)
    positions = np.zeros((0, 2))
    accepted_radii = np.zeros(0)
    for radius in radii:
        for _ in range(max_tries):
            xy = rng.uniform(-half, half, 2)
            gaps = np.hypot(*(positions - xy).T) - accepted_radii - radius if positions.size else np.ones(1)
            if np.all(gaps > 0):
                positions = np.vstack([positions, xy])
                accepted_radii = np.append(accepted_radii, radius)
                break
    return np.column_stack([positions, accepted_radii]) if positions.size else np.zeros((0, 3))


def generate_scene(seed: int, params: SynthParams | None = None) -> ForestScene:
    """Deterministic scene; the tree count is Poisson(density * area)."""
    params = params or SynthParams()
    rng = np.random.default_rng(seed)
    waves = _terrain_waves(rng, params)
    count = int(rng.poisson(params.tree_density * params.extent ** 2))
    placed = _place_trees(rng, params, count)
    n = placed.shape[0]
    heights = rng.uniform(params.tree_height_min, params.tree_height_max, n)
    canopy = rng.uniform(params.canopy_radius_min, params.canopy_radius_max, n)
    trees = np.column_stack([placed, heights, canopy]) if n else np.zeros((0, 5))
    if n < count:
        logger.warning(f"Placed {n} of {count} trees; the scene is too crowded for non-overlapping trunks")
    logger.info(f"Generated scene seed={seed} with {n} trees")
    return ForestScene(seed=seed, params=params, waves=waves, trees=trees)
