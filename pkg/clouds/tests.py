import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from clouds.pcd_io import load_pcd, load_poses, read_pcd, save_pcd, save_poses
from clouds.pointcloud import PointCloud, Pose, VoxelSet, rotate_z, transform, voxelize
from clouds.spatial import PlanarIndex, radius_neighbors_2d
from forestlpr.exceptions import ConfigError, DatasetError, PCDFormatError

ASCII_HEADER = (
    "# .PCD v0.7 - Point Cloud Data file format\n"
    "VERSION 0.7\n"
    "FIELDS x y z intensity\n"
    "SIZE 4 4 4 4\n"
    "TYPE F F F F\n"
    "COUNT 1 1 1 1\n"
    "WIDTH {n}\n"
    "HEIGHT 1\n"
    "VIEWPOINT 0 0 0 1 0 0 0\n"
    "POINTS {n}\n"
    "DATA {data}\n"
)


class PointCloudTests(SimpleTestCase):

    def test_points_are_read_only(self):
        cloud = PointCloud([[1, 2, 3], [4, 5, 6]])
        self.assertEqual(len(cloud), 2)
        with self.assertRaises(ValueError):
            cloud.points[0, 0] = 9.0

    def test_non_finite_points_rejected(self):
        with self.assertRaises(DatasetError):
            PointCloud([[0.0, np.nan, 1.0]])

    def test_with_z_keeps_xy(self):
        cloud = PointCloud([[1, 2, 3], [4, 5, 6]]).with_z([0.5, 0.25])
        np.testing.assert_array_equal(cloud.points, [[1, 2, 0.5], [4, 5, 0.25]])

    def test_rotate_z_quarter_turn(self):
        rotated = rotate_z(PointCloud([[1.0, 0.0, 2.0]]), math.pi / 2)
        np.testing.assert_allclose(rotated.points, [[0.0, 1.0, 2.0]], atol=1e-12)

    def test_rotate_z_rejects_nan_angle(self):
        with self.assertRaises(ConfigError):
            rotate_z(PointCloud([[1.0, 0.0, 0.0]]), float('nan'))


class PoseTests(SimpleTestCase):

    def test_from_components_normalizes_quaternion(self):
        pose = Pose.from_components(1, 2, 3, 0, 0, 0, 2)
        np.testing.assert_allclose(pose.rotation, [1, 0, 0, 0])

    def test_zero_quaternion_rejected(self):
        with self.assertRaises(DatasetError):
            Pose.from_components(0, 0, 0, 0, 0, 0, 0)

    def test_inverse_undoes_transform(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=4)
        pose = Pose.from_components(*rng.normal(size=3), *q)
        cloud = PointCloud(rng.normal(size=(20, 3)))
        back = transform(transform(cloud, pose), pose.inverse())
        np.testing.assert_allclose(back.points, cloud.points, atol=1e-9)

    def test_yaw_round_trip(self):
        self.assertAlmostEqual(Pose.from_yaw(0, 0, 0, 0.7).yaw, 0.7, places=12)

    def test_components_round_trip(self):
        pose = Pose.from_yaw(1.5, -2.0, 0.25, 1.0)
        again = Pose.from_components(*pose.as_components())
        np.testing.assert_allclose(again.translation, pose.translation)
        np.testing.assert_allclose(again.rotation, pose.rotation)


class VoxelTests(SimpleTestCase):

    def test_voxelize_floors_coordinates(self):
        voxels = voxelize(PointCloud([[0.1, 0.1, 0.1], [0.4, 0.2, 0.3], [-0.1, 0.0, 0.0]]), 0.5)
        self.assertEqual(voxels.cell_set(), {(0, 0, 0), (-1, 0, 0)})

    def test_voxelize_rejects_non_positive_edge(self):
        with self.assertRaises(ConfigError):
            voxelize(PointCloud([[0, 0, 0]]), 0.0)

    def test_intersection_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            a = VoxelSet(0.5, rng.integers(-40, 40, size=(rng.integers(0, 60), 3)))
            b = VoxelSet(0.5, rng.integers(-40, 40, size=(rng.integers(0, 60), 3)))
            self.assertEqual(a.intersection_size(b), len(a.cell_set() & b.cell_set()))

    def test_intersection_with_far_cells(self):
        a = VoxelSet(1.0, [[1000, -1000, 5], [0, 0, 0]])
        b = VoxelSet(1.0, [[1000, -1000, 5], [1, 0, 0]])
        self.assertEqual(a.intersection_size(b), 1)


class PlanarIndexTests(SimpleTestCase):

    def test_radius_is_strict_and_ignores_z(self):
        cloud = PointCloud([[3.0, 0.0, 0.0], [2.9, 0.0, 50.0], [0.0, -1.0, -7.0]])
        neighbours = radius_neighbors_2d(cloud, (0.0, 0.0, 100.0), 3.0)
        self.assertEqual([i for i, _ in neighbours], [1, 2])
        self.assertAlmostEqual(neighbours[0][1], 2.9)

    def test_query_many_matches_single_queries(self):
        rng = np.random.default_rng(2)
        index = PlanarIndex(PointCloud(rng.uniform(-5, 5, size=(300, 3))))
        centres = rng.uniform(-5, 5, size=(10, 2))
        for (x, y), (many, _) in zip(centres, index.query_many(centres, 1.5)):
            single, _ = index.query(x, y, 1.5)
            np.testing.assert_array_equal(many, single)

    def test_matches_brute_force_scan(self):
        rng = np.random.default_rng(11)
        for size in (1, 10, 100, 1000, 10_000):
            # half-metre lattice coordinates put many points exactly on the radius
            points = np.round(rng.uniform(-20, 20, size=(size, 3)) * 2) / 2
            index = PlanarIndex(PointCloud(points))
            stored = index.cloud.xy
            for radius in (0.5, 1.0, 2.5, 7.0):
                for query in np.round(rng.uniform(-20, 20, size=(5, 2)) * 2) / 2:
                    offsets = stored - query
                    distances = np.sqrt(offsets[:, 0] ** 2 + offsets[:, 1] ** 2)
                    expected = [(int(i), float(distances[i])) for i in np.flatnonzero(distances < radius)]
                    self.assertEqual(radius_neighbors_2d(index, query, radius), expected, f'{size} {radius}')

    def test_empty_cloud_has_no_neighbours(self):
        self.assertEqual(radius_neighbors_2d(PointCloud.empty(), (0, 0), 1.0), [])

    def test_radius_must_be_positive(self):
        with self.assertRaises(ConfigError):
            PlanarIndex(PointCloud([[0, 0, 0]])).query(0, 0, 0)


class PCDTests(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def write(self, name, payload):
        path = self.tmp / name
        path.write_bytes(payload if isinstance(payload, bytes) else payload.encode('ascii'))
        return path

    def test_ascii_drops_nan_rows_and_extra_fields(self):
        body = "1 2 3 10\nnan 0 0 11\n4 5 6 12\n"
        path = self.write('a.pcd', ASCII_HEADER.format(n=3, data='ascii') + body)
        cloud, dropped = read_pcd(path)
        self.assertEqual(dropped, 1)
        np.testing.assert_array_equal(cloud.points, [[1, 2, 3], [4, 5, 6]])

    def test_binary_with_padding_field(self):
        header = ASCII_HEADER.replace('x y z intensity', 'x y z rgb').replace('TYPE F F F F', 'TYPE F F F U')
        records = np.zeros(2, dtype=[('x', '<f4'), ('y', '<f4'), ('z', '<f4'), ('rgb', '<u4')])
        records['x'], records['y'], records['z'] = [1.5, -2.0], [0.25, 3.0], [4.0, 0.5]
        path = self.write('b.pcd', header.format(n=2, data='binary').encode('ascii') + records.tobytes())
        np.testing.assert_array_equal(load_pcd(path).points, [[1.5, 0.25, 4.0], [-2.0, 3.0, 0.5]])

    def test_round_trip_binary_and_ascii(self):
        cloud = PointCloud([[0.5, -1.25, 2.0], [3.0, 4.5, -0.75]])
        for binary in (True, False):
            path = save_pcd(cloud, self.tmp / f'{binary}.pcd', binary=binary)
            np.testing.assert_array_equal(load_pcd(path).points, cloud.points)

    def test_compressed_encoding_unsupported(self):
        path = self.write('c.pcd', ASCII_HEADER.format(n=0, data='binary_compressed'))
        with self.assertRaises(PCDFormatError) as ctx:
            load_pcd(path)
        self.assertIn('binary_compressed', str(ctx.exception))

    def test_missing_fields_line(self):
        path = self.write('d.pcd', "VERSION 0.7\nSIZE 4\nTYPE F\nPOINTS 0\nDATA ascii\n")
        with self.assertRaises(PCDFormatError):
            load_pcd(path)

    def test_point_count_mismatch(self):
        path = self.write('e.pcd', ASCII_HEADER.format(n=3, data='ascii') + "1 2 3 4\n")
        with self.assertRaises(PCDFormatError):
            load_pcd(path)

    def test_truncated_binary_body(self):
        path = self.write('f.pcd', ASCII_HEADER.format(n=4, data='binary').encode('ascii') + b'\x00' * 20)
        with self.assertRaises(PCDFormatError):
            load_pcd(path)

    def test_malformed_header_line_is_reported(self):
        path = self.write('g.pcd', "VERSION 0.7\nFIELDS x y z\nBOGUS\nDATA ascii\n")
        with self.assertRaises(PCDFormatError) as ctx:
            load_pcd(path)
        self.assertEqual(ctx.exception.line, 'BOGUS')

    def test_pose_file_round_trip(self):
        poses = [(0.0, Pose.from_yaw(1, 2, 3, 0.5)), (10.0, Pose.identity())]
        path = save_poses(poses, self.tmp / 'poses.txt')
        loaded = load_poses(path)
        self.assertEqual([t for t, _ in loaded], [0.0, 10.0])
        np.testing.assert_allclose(loaded[0][1].translation, [1, 2, 3])
        np.testing.assert_allclose(loaded[0][1].rotation, poses[0][1].rotation)

    def test_pose_file_wrong_column_count(self):
        path = self.write('poses.txt', "0 1 2 3\n")
        with self.assertRaises(DatasetError):
            load_poses(path)
