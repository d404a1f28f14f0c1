import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase
from PIL import Image

from bev.export import pgm_bytes, raw_bytes, read_raw, write_stack
from bev.raster import (
    BevConfig, DensityImage, grid_size, make_bev_stack, point_counts, rasterize_density, rasterize_elevation,
    resize_bilinear, slice_cloud,
)
from clouds.pointcloud import PointCloud
from forestlpr.exceptions import ConfigError, ModelFormatError
from terrain.tests import write_raw_manifest


def brute_force_density(points, res, extent):
    cells = int(round(2 * extent / res))
    counts = np.zeros((cells, cells))
    for x, y, _ in points:
        u, v = int(np.floor((x + extent) / res)), int(np.floor((y + extent) / res))
        if 0 <= u < cells and 0 <= v < cells:
            counts[u, v] += 1
    logs = np.log(counts + 1.0)
    if logs.max() == logs.min():
        return np.zeros_like(logs)
    return (logs - logs.min()) / (logs.max() - logs.min())


def interior_cloud(rng, cells, res, extent, count):
    """Points strictly inside random cells, away from every cell boundary."""
    i = rng.integers(0, cells, count)
    j = rng.integers(0, cells, count)
    x = (i + rng.uniform(0.1, 0.9, count)) * res - extent
    y = (j + rng.uniform(0.1, 0.9, count)) * res - extent
    return np.column_stack([x, y, rng.uniform(1.0, 6.0, count)])


class BevConfigTests(SimpleTestCase):

    def test_defaults_cover_sixty_meters(self):
        cfg = BevConfig()
        self.assertEqual(cfg.grid, 120)
        self.assertEqual(cfg.bands(), [(1.0, 2.0), (2.0, 3.0), (3.0, 4.0), (4.0, 5.0), (5.0, 6.0)])

    def test_grid_must_be_integral(self):
        with self.assertRaises(ConfigError):
            grid_size(0.7, 30.0)

    def test_unknown_mode(self):
        with self.assertRaises(ConfigError):
            BevConfig(mode='intensity')


class DensityTests(SimpleTestCase):

    def test_empty_cloud_gives_zero_image(self):
        image = rasterize_density(PointCloud.empty(), 0.5, 5.0)
        self.assertEqual(image.shape, (20, 20))
        self.assertFalse(image.values.any())

    def test_single_occupied_cell_is_one(self):
        image = rasterize_density(PointCloud([[0.1, 0.1, 2.0], [0.2, 0.3, 2.5]]), 0.5, 5.0)
        self.assertEqual(image.values[10, 10], 1.0)
        self.assertEqual(image.values.sum(), 1.0)

    def test_constant_image_is_zero(self):
        res, extent = 1.0, 2.0
        centres = [[u + 0.5 - extent, v + 0.5 - extent, 1.5] for u in range(4) for v in range(4)]
        image = rasterize_density(PointCloud(centres), res, extent)
        self.assertFalse(image.values.any())

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            points = rng.uniform(-6.0, 6.0, size=(rng.integers(1, 200), 3))
            image = rasterize_density(PointCloud(points), 0.5, 5.0)
            self.assertEqual(np.abs(image.values - brute_force_density(points, 0.5, 5.0)).max(), 0.0)

    def test_out_of_extent_points_are_dropped(self):
        counts = point_counts(PointCloud([[5.0, 0.0, 1.0], [-5.0, 0.0, 1.0], [4.99, 0.0, 1.0]]), 0.5, 5.0)
        self.assertEqual(counts.sum(), 2)
        self.assertEqual(counts[0, 10], 1)
        self.assertEqual(counts[19, 10], 1)

    def test_quarter_turns_permute_pixels(self):
        rng = np.random.default_rng(7)
        res, extent = 0.5, 5.0
        cells = grid_size(res, extent)
        for _ in range(1000):
            points = interior_cloud(rng, cells, res, extent, int(rng.integers(1, 40)))
            image = rasterize_density(PointCloud(points), res, extent).values
            turned = points.copy()
            for k in range(1, 4):
                turned = np.column_stack([-turned[:, 1], turned[:, 0], turned[:, 2]])
                rotated = rasterize_density(PointCloud(turned), res, extent).values
                np.testing.assert_array_equal(rotated, np.rot90(image, k))


class ElevationAndStackTests(SimpleTestCase):

    def test_elevation_uses_maximum_height(self):
        cloud = PointCloud([[0.1, 0.1, 2.0], [0.2, 0.2, 3.0], [-1.0, -1.0, 2.5]])
        image = rasterize_elevation(cloud, 0.5, 5.0, floor=1.0)
        self.assertEqual(image.values[10, 10], 1.0)
        self.assertEqual(image.values[8, 8], 0.75)
        self.assertEqual(image.values[0, 0], 0.0)

    def test_slices_partition_by_height(self):
        cloud = PointCloud([[0, 0, 1.0], [0, 0, 1.99], [0, 0, 2.0], [0, 0, 5.5], [0, 0, 6.0], [0, 0, 0.5]])
        parts = slice_cloud(cloud, 1.0, 1.0, 5)
        self.assertEqual([len(p) for p in parts], [2, 1, 0, 0, 1])

    def test_resize_preserves_corners(self):
        values = np.arange(16, dtype=float).reshape(4, 4) / 15.0
        resized = resize_bilinear(DensityImage(values, 1.0, 2.0), 7, 7)
        self.assertEqual(resized.shape, (7, 7))
        self.assertAlmostEqual(resized.values[0, 0], values[0, 0])
        self.assertAlmostEqual(resized.values[-1, -1], values[-1, -1])
        self.assertAlmostEqual(resized.values[3, 3], values[1:3, 1:3].mean())

    def test_stack_has_one_image_per_slice(self):
        rng = np.random.default_rng(1)
        cfg = BevConfig(res=0.9375, height=64, width=64)
        stack = make_bev_stack(PointCloud(rng.uniform([-30, -30, 1], [30, 30, 6], size=(2000, 3))), cfg)
        self.assertEqual(stack.as_array().shape, (5, 64, 64))
        self.assertTrue(((stack.as_array() >= 0) & (stack.as_array() <= 1)).all())

    def test_elevation_mode_flag(self):
        cloud = PointCloud([[0.1, 0.1, 1.2], [3.0, 3.0, 1.8]])
        cfg = BevConfig(slices=1, res=0.5, extent=5.0, height=20, width=20, mode='elevation')
        stack = make_bev_stack(cloud, cfg)
        self.assertEqual(stack.mode, 'elevation')
        self.assertEqual(stack.images[0].values[16, 16], 1.0)


class ExportTests(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_pgm_is_sixteen_bit(self):
        image = DensityImage(np.array([[0.0, 1.0], [0.5, 0.25]]), 1.0, 1.0)
        payload = pgm_bytes(image)
        self.assertTrue(payload.startswith(b'P5'))
        self.assertIn(b'65535', payload[:32])
        path = self.tmp / 'x.pgm'
        path.write_bytes(payload)
        with Image.open(path) as loaded:
            self.assertEqual(np.asarray(loaded).astype(int).tolist(), [[0, 65535], [32768, 16384]])

    def test_raw_round_trip(self):
        image = DensityImage(np.array([[0.0, 1.0, 0.5]]), 1.0, 1.5)
        path = self.tmp / 'x.f32'
        path.write_bytes(raw_bytes(image))
        np.testing.assert_array_equal(read_raw(path, 1.0, 1.5).values, image.values)

    def test_truncated_raw(self):
        path = self.tmp / 'bad.f32'
        path.write_bytes(raw_bytes(DensityImage(np.zeros((2, 2)), 1.0, 1.0))[:-1])
        with self.assertRaises(ModelFormatError):
            read_raw(path, 1.0, 1.0)

    def test_write_stack_names(self):
        cfg = BevConfig(slices=2, slice_height=2.5, res=0.5, extent=5.0, height=20, width=20)
        stack = make_bev_stack(PointCloud([[0, 0, 1.5], [1, 1, 4.0]]), cfg)
        written = write_stack(stack, self.tmp, 'synth_0001')
        self.assertEqual(sorted(p.name for p in written),
                         ['synth_0001_s0.f32', 'synth_0001_s0.pgm', 'synth_0001_s1.f32', 'synth_0001_s1.pgm'])


class RasterizeCommandTests(SimpleTestCase):

    def rasterize(self, root, *args):
        manifest = write_raw_manifest(root)
        stdout = StringIO()
        call_command('rasterize', '--config', str(settings.BASE_DIR / 'configs' / 'toy.json'),
                     '--manifest', str(manifest), '--out', str(root / 'bev'), '--raw', *args, stdout=stdout)
        return stdout.getvalue()

    def test_writes_raw_and_pgm_per_slice(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            message = self.rasterize(root)
            images = sorted(p.name for p in (root / 'bev').glob('plot_0000_s*'))
            first = read_raw(root / 'bev' / 'plot_0000_s0.f32', 0.9375, 30.0).values
            self.assertTrue((root / 'bev' / 'config.json').exists())
        self.assertEqual(len(images), 10)
        self.assertIn('plot_0000_s4.pgm', images)
        self.assertEqual(first.shape, (64, 64))
        self.assertIn('Wrote 10 density images for 1 submaps', message)

    def test_no_pgm_and_elevation_mode(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            message = self.rasterize(root, '--no-pgm', '--bev-mode', 'elevation')
            images = sorted(p.name for p in (root / 'bev').glob('plot_0000_s*'))
        self.assertEqual(len(images), 5)
        self.assertTrue(all(name.endswith('.f32') for name in images))
        self.assertIn('elevation images', message)

    def test_existing_slice_images_need_overwrite(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            self.rasterize(root)
            (root / 'bev' / 'config.json').unlink()
            before = (root / 'bev' / 'plot_0000_s0.pgm').stat().st_mtime_ns
            with self.assertRaisesMessage(CommandError, 'plot_0000_s0.f32 already exists'):
                self.rasterize(root)
            self.assertEqual((root / 'bev' / 'plot_0000_s0.pgm').stat().st_mtime_ns, before)
            self.assertIn('Wrote 10 density images', self.rasterize(root, '--overwrite'))
