import tempfile
import time
from io import StringIO
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.test import SimpleTestCase

from clouds.pcd_io import save_pcd
from clouds.pointcloud import PointCloud, Pose
from datasets.manifest import Manifest, SubmapRecord, load_manifest
from forestlpr.exceptions import ConfigError, DegenerateInputError
from terrain.ground import GroundLabeling, GridSurface, PreprocessConfig, segment_ground
from terrain.normalize import crop_band, normalize_height, preprocess


def plane(x, y):
    return 0.1 * x + 0.05 * y


def sloped_ground(half=20.0, step=0.5):
    axis = np.arange(-half, half + step / 2, step)
    gx, gy = np.meshgrid(axis, axis, indexing='ij')
    gx, gy = gx.ravel(), gy.ravel()
    return np.column_stack([gx, gy, plane(gx, gy)])


def poles(count=50, seed=0, heights=np.arange(1.5, 5.01, 0.5)):
    rng = np.random.default_rng(seed)
    nodes = rng.choice(np.arange(-15.0, 15.01, 0.5), size=(count, 2))
    blocks = [np.column_stack([np.full(heights.size, x), np.full(heights.size, y), plane(x, y) + heights])
              for x, y in nodes]
    return np.vstack(blocks), np.tile(heights, count)


class FlatSurfaceEstimator:
    """Test double that reports the exact sloped plane."""

    def fit(self, cloud):
        return self

    def height_at(self, xy):
        xy = np.asarray(xy).reshape(-1, 2)
        return plane(xy[:, 0], xy[:, 1])


class PreprocessConfigTests(SimpleTestCase):

    def test_defaults(self):
        cfg = PreprocessConfig()
        self.assertEqual((cfg.radius, cfg.radius_max, cfg.z_lo, cfg.z_hi), (3.0, 10.0, 1.0, 6.0))
        self.assertEqual(cfg.search_radii(), [3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0])

    def test_invalid_ranges(self):
        with self.assertRaises(ConfigError):
            PreprocessConfig(radius=12.0)
        with self.assertRaises(ConfigError):
            PreprocessConfig(z_lo=6.0, z_hi=1.0)


class GroundSegmentationTests(SimpleTestCase):

    def test_sloped_ground_and_poles_are_separated(self):
        pole_points, _ = poles()
        ground = sloped_ground()
        cloud = PointCloud(np.vstack([ground, pole_points]))
        labeling = segment_ground(cloud, PreprocessConfig())
        self.assertEqual(set(labeling.ground.tolist()), set(range(len(ground))))
        self.assertEqual(labeling.non_ground.size, len(pole_points))

    def test_too_few_points(self):
        with self.assertRaises(DegenerateInputError):
            segment_ground(PointCloud([[0, 0, 0], [1, 1, 1]]), PreprocessConfig())

    def test_pluggable_estimator(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0.1], [0, 1, 0.05], [1, 1, 2.0]])
        labeling = segment_ground(cloud, PreprocessConfig(), estimator=FlatSurfaceEstimator())
        self.assertEqual(labeling.non_ground.tolist(), [3])

    def test_labeling_must_be_disjoint(self):
        with self.assertRaises(ConfigError):
            GroundLabeling([0, 1], [1, 2])

    def test_grid_surface_interpolates_bilinearly(self):
        surface = GridSurface(origin=(0.0, 0.0), cell=1.0, heights=np.array([[0.0, 1.0], [2.0, 3.0]]))
        self.assertAlmostEqual(float(surface.height_at([[1.0, 1.0]])[0]), 1.5)


class NormalizeTests(SimpleTestCase):

    def test_pole_points_on_sloped_terrain(self):
        started = time.perf_counter()
        pole_points, heights = poles()
        cloud = PointCloud(np.vstack([sloped_ground(), pole_points]))
        result = preprocess(cloud, PreprocessConfig())
        self.assertLess(time.perf_counter() - started, 5.0)
        self.assertEqual(len(result), len(pole_points))
        order = np.lexsort((result.z, result.y, result.x))
        expected = np.column_stack([pole_points[:, :2], heights])
        expected_order = np.lexsort((expected[:, 2], expected[:, 1], expected[:, 0]))
        np.testing.assert_allclose(result.points[order], expected[expected_order], atol=1e-3)

    def test_symmetric_neighbourhood_gives_planar_height(self):
        ground = sloped_ground(half=10.0)
        cloud = PointCloud(np.vstack([ground, [[0.25, 0.25, plane(0.25, 0.25) + 2.0]]]))
        labeling = GroundLabeling(np.arange(len(ground)), [len(ground)])
        normalized = normalize_height(cloud, labeling, PreprocessConfig())
        self.assertAlmostEqual(float(normalized.z[0]), 2.0, places=9)

    def test_radius_grows_until_ground_is_found(self):
        cloud = PointCloud([[0, 0, 0], [0.5, 0, 0], [0, 0.5, 0], [6.5, 0, 3.0]])
        labeling = GroundLabeling([0, 1, 2], [3])
        normalized = normalize_height(cloud, labeling, PreprocessConfig())
        self.assertEqual(len(normalized), 1)
        self.assertAlmostEqual(float(normalized.z[0]), 3.0)

    def test_points_without_ground_are_dropped(self):
        cloud = PointCloud([[0, 0, 0], [0.5, 0, 0], [30, 30, 2.0], [0.2, 0.2, 2.0]])
        labeling = GroundLabeling([0, 1], [2, 3])
        with self.assertLogs('terrain.normalize', level='WARNING'):
            normalized = normalize_height(cloud, labeling, PreprocessConfig())
        np.testing.assert_allclose(normalized.points, [[0.2, 0.2, 2.0]])

    def test_uniform_terrain_offset_changes_no_height(self):
        rng = np.random.default_rng(4)
        ground = np.column_stack([rng.uniform(-8, 8, size=(400, 2)), rng.uniform(-0.5, 0.5, 400)])
        trees = np.column_stack([rng.uniform(-6, 6, size=(100, 2)), rng.uniform(1, 8, 100)])
        points = np.vstack([ground, trees])
        labeling = GroundLabeling(np.arange(400), np.arange(400, 500))
        base = normalize_height(PointCloud(points), labeling, PreprocessConfig())
        for offset in (-35.0, 2.5, 120.0):
            shifted = normalize_height(PointCloud(points + [0.0, 0.0, offset]), labeling, PreprocessConfig())
            np.testing.assert_allclose(shifted.z, base.z, atol=1e-9)
            np.testing.assert_array_equal(shifted.xy, base.xy)

    def test_preprocess_ignores_uniform_terrain_offset(self):
        pole_points, _ = poles(count=20)
        points = np.vstack([sloped_ground(), pole_points])
        base = preprocess(PointCloud(points), PreprocessConfig())
        shifted = preprocess(PointCloud(points + [0.0, 0.0, 40.0]), PreprocessConfig())
        self.assertEqual(len(shifted), len(base))
        np.testing.assert_allclose(shifted.points, base.points, atol=1e-9)

    def test_preprocess_is_idempotent_on_flat_terrain(self):
        pole_points, _ = poles(count=20)
        first = preprocess(PointCloud(np.vstack([sloped_ground(), pole_points])), PreprocessConfig())
        flat_ground = sloped_ground() * [1.0, 1.0, 0.0]
        again = preprocess(PointCloud(np.vstack([flat_ground, first.points])), PreprocessConfig())
        np.testing.assert_array_equal(again.points, first.points)

    def test_crop_band_is_half_open(self):
        cloud = PointCloud([[0, 0, 1.0], [0, 0, 6.0], [0, 0, 0.99], [0, 0, 5.99]])
        np.testing.assert_array_equal(crop_band(cloud, 1.0, 6.0).z, [1.0, 5.99])


def write_raw_manifest(root: Path) -> Path:
    """One sloped-ground submap with poles, saved as PCD with its manifest."""
    pole_points, _ = poles(count=20)
    save_pcd(PointCloud(np.vstack([sloped_ground(), pole_points])), root / 'raw' / 'plot_0000.pcd')
    record = SubmapRecord('plot_0000', 'plot', 0.0, 'raw/plot_0000.pcd', Pose([0.0, 0.0, 0.0]))
    return Manifest([record], base_dir=root).save(root / 'manifest.jsonl')


class PreprocessCommandTests(SimpleTestCase):

    def test_writes_normalized_submaps(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            manifest = write_raw_manifest(root)
            stdout = StringIO()
            call_command('preprocess', '--config', str(settings.BASE_DIR / 'configs' / 'toy.json'),
                         '--manifest', str(manifest), '--out', str(root / 'pre'), stdout=stdout)
            output = load_manifest(root / 'pre' / 'manifest.jsonl')
            cloud = output.load_cloud(output.get('plot_0000'))
            self.assertTrue((root / 'pre' / 'config.json').exists())
        self.assertEqual(output.get('plot_0000').pcd, 'pcd/plot_0000.pcd')
        self.assertEqual(len(cloud), 20 * 8)
        self.assertGreaterEqual(cloud.z.min(), 1.0)
        self.assertLess(cloud.z.max(), 6.0)
        self.assertIn('Pre-processed 1 submaps', stdout.getvalue())
