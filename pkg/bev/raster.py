"""
Height slicing and BEV density / elevation rasterization.

Images are indexed ``values[u, v]`` with u the x cell and v the y cell of a
grid spanning [-E, E) on both axes, anchored at the submap center.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from clouds.pointcloud import PointCloud
from forestlpr.exceptions import ConfigError

logger = logging.getLogger(__name__)

BEV_MODES = ('density', 'elevation')

SLICE_PRESETS = {
    'default': {'slices': 5, 'slice_height': 1.0},
    'fine': {'slices': 10, 'slice_height': 0.5},
    'coarse': {'slices': 2, 'slice_height': 2.5},
}


def grid_size(res: float, extent: float) -> int:
    """Cells per axis (2E/res); must be a whole number."""
    if not res > 0 or not extent > 0:
        raise ConfigError("bev.res and bev.extent must be > 0")
    cells = 2.0 * extent / res
    rounded = int(round(cells))
    if rounded < 1 or abs(cells - rounded) > 1e-9 * max(1.0, cells):
        raise ConfigError(f"bev grid dimension 2E/res = {cells!r} is not an integer")
    return rounded


@dataclass(frozen=True)
class BevConfig:
    slices: int = 5
    slice_height: float = 1.0
    z_lo: float = 1.0
    res: float = 0.5
    extent: float = 30.0
    height: int = 480
    width: int = 480
    mode: str = 'density'

    def __post_init__(self):
        if self.slices < 1:
            raise ConfigError("bev.slices must be >= 1")
        if not self.slice_height > 0:
            raise ConfigError("bev.slice_height must be > 0")
        if self.height < 1 or self.width < 1:
            raise ConfigError("bev.height and bev.width must be >= 1")
        if self.mode not in BEV_MODES:
            raise ConfigError(f"bev.mode must be one of {BEV_MODES}")
        grid_size(self.res, self.extent)

    @property
    def grid(self) -> int:
        return grid_size(self.res, self.extent)

    def bands(self) -> list[tuple[float, float]]:
        return [(self.z_lo + j * self.slice_height, self.z_lo + (j + 1) * self.slice_height)
                for j in range(self.slices)]


@dataclass(frozen=True, eq=False)
class DensityImage:
    """Single-channel BEV raster with values in [0, 1]."""

    values: np.ndarray
    res: float
    extent: float

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class BevStack:
    images: tuple
    bands: tuple
    mode: str = 'density'
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) < 1:
            raise ConfigError("a BEV stack needs at least one image")
        if len({img.shape for img in self.images}) != 1:
            raise ConfigError("all BEV images in a stack must share one shape")
        if len(self.bands) != len(self.images):
            raise ConfigError("one height band per BEV image is required")

    def __len__(self) -> int:
        return len(self.images)

    def as_array(self) -> np.ndarray:
        """(S, H, W) float64 array."""
        return np.stack([img.values for img in self.images])


def slice_cloud(cloud: PointCloud, z_lo: float, slice_height: float, slices: int) -> list[PointCloud]:
    """Split a normalized cloud into S height slices of thickness ``slice_height``."""
    if not slice_height > 0 or slices < 1:
        raise ConfigError("slice_cloud needs slice_height > 0 and slices >= 1")
    index = np.floor((cloud.z - z_lo) / slice_height).astype(np.int64)
    return [cloud.subset(index == j) for j in range(slices)]


def _cell_indices(cloud: PointCloud, res: float, extent: float):
    cells = grid_size(res, extent)
    u = np.floor((cloud.x + extent) / res).astype(np.int64)
    v = np.floor((cloud.y + extent) / res).astype(np.int64)
    inside = (u >= 0) & (u < cells) & (v >= 0) & (v < cells)
    return cells, u[inside], v[inside], inside


def _min_max(values: np.ndarray) -> np.ndarray:
    v_max, v_min = values.max(), values.min()
    if v_max == v_min:
        return np.zeros_like(values)
    return (values - v_min) / (v_max - v_min)


def point_counts(cloud: PointCloud, res: float, extent: float) -> np.ndarray:
    """Raw per-cell point counts V'(u, v); out-of-extent points are dropped."""
    cells, u, v, _ = _cell_indices(cloud, res, extent)
    return np.bincount(u * cells + v, minlength=cells * cells).reshape(cells, cells)


def rasterize_density(cloud: PointCloud, res: float, extent: float) -> DensityImage:
    """Log point density per cell, min-max normalized; a constant image becomes zeros."""
    counts = point_counts(cloud, res, extent).astype(np.float64)
    return DensityImage(_min_max(np.log(counts + 1.0)), res, extent)


def rasterize_elevation(cloud: PointCloud, res: float, extent: float, floor: float = 0.0) -> DensityImage:
    """Maximum height per cell (empty cells take ``floor``), min-max normalized."""
    cells, u, v, inside = _cell_indices(cloud, res, extent)
    elevation = np.full(cells * cells, float(floor))
    np.maximum.at(elevation, u * cells + v, cloud.z[inside])
    return DensityImage(_min_max(elevation.reshape(cells, cells)), res, extent)


def resize_bilinear(image: DensityImage, height: int, width: int) -> DensityImage:
    """Align-corners bilinear resampling to ``height`` x ``width``."""
    if height < 1 or width < 1:
        raise ConfigError("resize target must be at least 1x1")
    h, w = image.shape
    if (h, w) == (height, width):
        return image
    rows = np.linspace(0.0, h - 1, height) if height > 1 else np.zeros(1)
    cols = np.linspace(0.0, w - 1, width) if width > 1 else np.zeros(1)
    grid_r, grid_c = np.meshgrid(rows, cols, indexing='ij')
    values = ndimage.map_coordinates(image.values, [grid_r, grid_c], order=1, mode='nearest')
    return DensityImage(values, res=2.0 * image.extent / height, extent=image.extent)


def make_bev_stack(cloud: PointCloud, cfg: BevConfig) -> BevStack:
    """Slice, rasterize (density or elevation) and resize every slice to the network input size."""
    images = []
    bands = cfg.bands()
    for (band_lo, _), part in zip(bands, slice_cloud(cloud, cfg.z_lo, cfg.slice_height, cfg.slices)):
        if cfg.mode == 'elevation':
            image = rasterize_elevation(part, cfg.res, cfg.extent, floor=band_lo)
        else:
            image = rasterize_density(part, cfg.res, cfg.extent)
        images.append(resize_bilinear(image, cfg.height, cfg.width))
    return BevStack(images=tuple(images), bands=tuple(bands), mode=cfg.mode)
