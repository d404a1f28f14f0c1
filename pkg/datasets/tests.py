import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase

from clouds.pcd_io import save_pcd, save_poses
from clouds.pointcloud import PointCloud, Pose
from datasets.io import atomic_write, atomic_write_csv, atomic_write_text, ensure_writable, read_csv
from datasets.manifest import Manifest, SubmapRecord, load_manifest, parse_record
from forestlpr.exceptions import DatasetError

LINE = {'id': 'a_0000', 'sequence': 'a', 'timestamp': 12.5, 'pcd': 'pcd/a_0000.pcd',
        'pose': [1.0, 2.0, 0.5, 0.0, 0.0, 0.0, 1.0]}


class ManifestTests(SimpleTestCase):

    def write_lines(self, tmp, *lines):
        path = Path(tmp) / 'manifest.jsonl'
        path.write_text(''.join(line + '\n' for line in lines))
        return path

    def test_parse_record(self):
        record = parse_record(LINE, 1)
        self.assertEqual(record.position, (1.0, 2.0))
        self.assertEqual(record.to_json(), LINE)

    def test_unknown_and_missing_keys(self):
        with self.assertRaisesRegex(DatasetError, 'line 3: colour: unknown key'):
            parse_record(dict(LINE, colour='red'), 3)
        with self.assertRaisesRegex(DatasetError, 'pose'):
            parse_record({k: v for k, v in LINE.items() if k != 'pose'}, 1)
        with self.assertRaisesRegex(DatasetError, 'quaternion'):
            parse_record(dict(LINE, pose=[0, 0, 0, 0, 0, 0, 0]), 1)

    def test_load_and_save(self):
        second = dict(LINE, id='b_0000', sequence='b', pcd='/data/b.pcd')
        with tempfile.TemporaryDirectory() as tmp:
            path = self.write_lines(tmp, json.dumps(LINE), '', json.dumps(second))
            manifest = load_manifest(path)
            self.assertEqual(manifest.pcd_path(manifest.get('a_0000')), Path(tmp) / 'pcd' / 'a_0000.pcd')
            self.assertEqual(manifest.pcd_path(manifest.get('b_0000')), Path('/data/b.pcd'))
            manifest.save(Path(tmp) / 'copy.jsonl')
            self.assertEqual(load_manifest(Path(tmp) / 'copy.jsonl').ids, ['a_0000', 'b_0000'])
        self.assertEqual(manifest.sequences(), ['a', 'b'])
        self.assertEqual([r.id for r in manifest.for_sequence('b')], ['b_0000'])
        self.assertIn('a_0000', manifest)

    def test_invalid_manifests(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaisesRegex(DatasetError, 'line 2: invalid JSON'):
                load_manifest(self.write_lines(tmp, json.dumps(LINE), '{"id": '))
            with self.assertRaisesRegex(DatasetError, 'duplicate'):
                load_manifest(self.write_lines(tmp, json.dumps(LINE), json.dumps(LINE)))
            with self.assertRaises(DatasetError):
                load_manifest(Path(tmp) / 'missing.jsonl')

    def test_missing_cloud(self):
        manifest = Manifest([parse_record(LINE)], base_dir='/nonexistent')
        with self.assertRaises(DatasetError):
            manifest.load_cloud(manifest.get('a_0000'))
        with self.assertRaises(DatasetError):
            manifest.check_files()
        with self.assertRaises(DatasetError):
            manifest.get('z')


class FileHelperTests(SimpleTestCase):

    def test_atomic_write_leaves_no_temp_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = atomic_write(Path(tmp) / 'nested' / 'out.bin', b'\x00\x01')
            self.assertEqual(path.read_bytes(), b'\x00\x01')
            atomic_write_text(path, 'replaced')
            self.assertEqual(path.read_text(), 'replaced')
            self.assertEqual([p.name for p in path.parent.iterdir()], ['out.bin'])

    def test_csv_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = atomic_write_csv(Path(tmp) / 'rows.csv', ['a', 'b'], [{'a': 1, 'b': 'x', 'c': 'ignored'}])
            self.assertEqual(path.read_text(), 'a,b\n1,x\n')
            self.assertEqual(read_csv(path), [{'a': '1', 'b': 'x'}])
            with self.assertRaises(DatasetError):
                read_csv(Path(tmp) / 'missing.csv')

    def test_ensure_writable(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = atomic_write_text(Path(tmp) / 'out.txt', 'x')
            with self.assertRaisesRegex(DatasetError, '--overwrite'):
                ensure_writable(path, overwrite=False)
            self.assertEqual(ensure_writable(path, overwrite=True), path)


class ImportPosesCommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.poses = [(0.0, Pose([0.0, 0.0, 0.0])), (10.0, Pose.from_yaw(5.0, 1.0, 0.2, 0.3))]
        save_poses(self.poses, self.root / 'poses.txt')
        for name in ('000001.pcd', '000000.pcd'):
            save_pcd(PointCloud([[1.0, 2.0, 3.0]]), self.root / 'scans' / name)

    def tearDown(self):
        self.tmp.cleanup()

    def run_import(self, *extra):
        call_command('import_poses', '--poses', str(self.root / 'poses.txt'), '--pcd-dir', str(self.root / 'scans'),
                     '--sequence', 'plot1', '--out', str(self.root / 'out' / 'manifest.jsonl'), *extra,
                     stdout=StringIO())
        return load_manifest(self.root / 'out' / 'manifest.jsonl')

    def test_records_follow_file_order(self):
        manifest = self.run_import()
        self.assertEqual(manifest.ids, ['plot1_0000', 'plot1_0001'])
        first, second = manifest.records
        self.assertEqual(first.pcd, '../scans/000000.pcd')
        self.assertEqual(second.timestamp, 10.0)
        np.testing.assert_allclose(second.pose.translation, [5.0, 1.0, 0.2])
        self.assertEqual(len(manifest.load_cloud(second)), 1)

    def test_refuses_to_overwrite(self):
        self.run_import()
        with self.assertRaisesRegex(CommandError, '^error=DatasetError message=.*--overwrite'):
            self.run_import()
        self.run_import('--overwrite')

    def test_count_mismatch(self):
        save_pcd(PointCloud([[0.0, 0.0, 0.0]]), self.root / 'scans' / '000002.pcd')
        with self.assertRaisesRegex(CommandError, 'error=DatasetError message=3 PCD files but 2 poses'):
            self.run_import()
