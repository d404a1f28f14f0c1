import json
import math
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
import pytest
from django.conf import settings
from django.core.management import call_command
from django.test import SimpleTestCase

from clouds.pcd_io import load_pcd, load_poses
from datasets.io import read_csv
from datasets.manifest import load_manifest
from forestlpr.exceptions import ConfigError
from synth.sampling import CANOPY, build_trajectory, revisit_positives, sample_submaps, sample_surfaces
from synth.scene import SynthParams, generate_scene
from synth.writer import write_dataset

SMALL = dict(extent=40.0, loop_radius=8.0, submap_radius=10.0, tree_density=0.01,
             ground_density=0.5, understory_density=0.1)


class SceneTests(SimpleTestCase):

    def test_same_seed_same_scene(self):
        params = SynthParams(**SMALL)
        first, second = generate_scene(3, params), generate_scene(3, params)
        np.testing.assert_array_equal(first.trees, second.trees)
        np.testing.assert_array_equal(first.waves, second.waves)
        self.assertFalse(np.array_equal(first.trees, generate_scene(4, params).trees))

    def test_trunks_do_not_overlap(self):
        trees = generate_scene(0, SynthParams(**SMALL)).trees
        self.assertGreater(len(trees), 0)
        for i in range(len(trees)):
            for j in range(i + 1, len(trees)):
                gap = math.hypot(*(trees[i, :2] - trees[j, :2]))
                self.assertGreater(gap, trees[i, 2] + trees[j, 2])

    def test_tree_count_follows_poisson_mean(self):
        params = SynthParams(extent=100.0, loop_radius=20.0, submap_radius=20.0, tree_density=0.01)
        mean = params.tree_density * params.extent ** 2
        counts = [generate_scene(seed, params).tree_count for seed in range(100)]
        self.assertLessEqual(abs(np.mean(counts) - mean), 3 * math.sqrt(mean / len(counts)))
        self.assertLessEqual(abs(np.var(counts) - mean), 0.5 * mean)

    def test_zero_density_is_terrain_only(self):
        scene = generate_scene(0, SynthParams(**dict(SMALL, tree_density=0.0)))
        self.assertEqual(scene.tree_count, 0)
        self.assertEqual(scene.trees.shape, (0, 5))

    def test_terrain_stays_within_amplitude(self):
        scene = generate_scene(1, SynthParams(**SMALL))
        xy = np.random.default_rng(0).uniform(-20, 20, size=(500, 2))
        self.assertLessEqual(np.abs(scene.terrain_height(xy[:, 0], xy[:, 1])).max(), 2.0 + 1e-9)

    def test_presets_and_validation(self):
        sparse = SynthParams.from_preset('sparse', **SMALL)
        self.assertEqual(sparse.tree_height_max, 10.0)
        self.assertEqual(sparse.tree_density, 0.01)
        with self.assertRaises(ConfigError):
            SynthParams.from_preset('jungle')
        with self.assertRaises(ConfigError):
            SynthParams(extent=40.0, loop_radius=15.0, submap_radius=10.0)
        with self.assertRaises(ConfigError):
            SynthParams(terrain_amplitude=3.0)


class TrajectoryTests(SimpleTestCase):

    def setUp(self):
        self.scene = generate_scene(2, SynthParams(**SMALL))
        self.trajectory = build_trajectory(self.scene)

    def test_loop_layout(self):
        self.assertEqual(len(self.trajectory), 30)
        self.assertEqual([stop.visit for stop in self.trajectory[::10]], [0, 1, 2])
        self.assertEqual([stop.timestamp for stop in self.trajectory[:3]], [0.0, 10.0, 20.0])
        for stop in self.trajectory[:10]:
            self.assertAlmostEqual(math.hypot(*stop.pose.translation[:2]), 8.0)

    def test_revisits_stay_near_first_pass(self):
        first = self.trajectory[:10]
        for stop in self.trajectory[10:20]:
            offset = stop.pose.translation[:2] - first[stop.index - 10].pose.translation[:2]
            self.assertLessEqual(np.hypot(*offset), 1.0)
        reverse_start = self.trajectory[20].pose.translation[:2]
        self.assertLessEqual(np.hypot(*(reverse_start - first[-1].pose.translation[:2])), 1.0)


class SubmapTests(SimpleTestCase):

    def setUp(self):
        self.scene = generate_scene(5, SynthParams(**SMALL))

    def test_submaps_are_local_and_bounded(self):
        submaps = sample_submaps(self.scene)
        self.assertEqual([s.id for s in submaps[:2]], ['synth_0000', 'synth_0001'])
        for submap in submaps[:5]:
            self.assertGreater(len(submap.cloud), 0)
            self.assertLessEqual(np.hypot(submap.cloud.x, submap.cloud.y).max(), 10.2)

    def test_jobs_do_not_change_output(self):
        serial = sample_submaps(self.scene, jobs=1)
        threaded = sample_submaps(self.scene, jobs=4)
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.cloud.points, b.cloud.points)

    def test_revisit_positives(self):
        pairs = revisit_positives(sample_submaps(self.scene))
        self.assertEqual(len(pairs), 20)
        self.assertIn(('synth_0000', 'synth_0010'), pairs)

    def test_seasonal_canopy(self):
        summer, winter = sample_surfaces(self.scene, 0), sample_surfaces(self.scene, 1)
        static = summer.layers != CANOPY
        np.testing.assert_array_equal(summer.points[static], winter.points[winter.layers != CANOPY])
        self.assertFalse(np.array_equal(summer.points[~static], winter.points[winter.layers == CANOPY]))

    def test_blind_sector(self):
        scene = generate_scene(5, SynthParams(**SMALL, blind_sector_width=90.0, blind_sector_start=0.0,
                                              noise_sigma=0.0))
        cloud = sample_submaps(scene)[0].cloud
        azimuth = np.degrees(np.arctan2(cloud.y, cloud.x)) % 360.0
        self.assertFalse(np.any(azimuth < 90.0))

    def test_split_sequences(self):
        scene = generate_scene(5, SynthParams(**SMALL, split_sequences=True))
        self.assertEqual(sorted({s.sequence for s in sample_submaps(scene)}), ['synth-00', 'synth-01', 'synth-02'])


class WriterTests(SimpleTestCase):

    def test_dataset_layout(self):
        scene = generate_scene(6, SynthParams(**SMALL, passes=1, reverse_pass=False))
        submaps = sample_submaps(scene)
        with tempfile.TemporaryDirectory() as tmp:
            write_dataset(scene, submaps, tmp)
            manifest = load_manifest(Path(tmp) / 'manifest.jsonl')
            self.assertEqual(manifest.ids, [s.id for s in submaps])
            cloud = manifest.load_cloud(manifest.get('synth_0003'))
            np.testing.assert_allclose(cloud.points, submaps[3].cloud.points, atol=1e-4)
            self.assertEqual(len(load_poses(Path(tmp) / 'poses.txt')), len(submaps))
            info = json.loads((Path(tmp) / 'scene.json').read_text())
            self.assertTrue((Path(tmp) / 'pcd' / 'synth_0000.pcd').exists())
        self.assertEqual(info['seed'], 6)
        self.assertEqual(info['trees'], scene.tree_count)
        self.assertEqual(set(info['visits'].values()), {0})


@pytest.mark.slow
class EndToEndTests(SimpleTestCase):

    QUICK = ['synth.extent=80', 'synth.loop_radius=15', 'synth.submap_radius=20',
             'train.stage1_epochs=1', 'train.stage2_epochs=1']
    SINGLE_BEV = ['bev.slices=1', 'bev.slice_height=5.0']

    def run_pipeline(self, root: Path, overrides=(), seed=0) -> Path:
        common = ['--config', str(settings.BASE_DIR / 'configs' / 'toy.json'), '--jobs', '1']
        for override in overrides:
            common += ['--set', override]
        root.mkdir(parents=True, exist_ok=True)
        data = root / 'data'
        out = StringIO()
        call_command('synth', *common, '--seed', str(seed), '--out', str(data), stdout=out)
        manifest = str(data / 'manifest.jsonl')
        call_command('mine', *common, '--manifest', manifest, '--out', str(root / 'pairs.csv'), stdout=out)
        call_command('train', *common, '--manifest', manifest, '--pairs', str(root / 'pairs.csv'),
                     '--out', str(root / 'model.bin'), stdout=out)
        call_command('extract', *common, '--manifest', manifest, '--model', str(root / 'model.bin'),
                     '--out', str(root / 'descriptors.bin'), stdout=out)
        call_command('eval', *common, '--descriptors', str(root / 'descriptors.bin'), '--manifest', manifest,
                     '--out', str(root / 'report.csv'), stdout=out)
        return root / 'report.csv'

    def metrics(self, report: Path) -> dict:
        return {row['metric']: float(row['value']) for row in read_csv(report)}

    def test_pipeline_is_reproducible_and_beats_chance(self):
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            report = self.run_pipeline(Path(first), self.QUICK, seed=1)
            again = self.run_pipeline(Path(second), self.QUICK, seed=1)
            self.assertEqual(report.read_bytes(), again.read_bytes())
            self.assertTrue((Path(first) / 'report_radius.csv').exists())
            self.assertTrue((Path(first) / 'model.bin.loss.csv').exists())
            values = self.metrics(report)
        self.assertGreater(values['recall@1'], values['random_recall@1'])

    def test_toy_model_recognizes_revisits(self):
        with tempfile.TemporaryDirectory() as tmp:
            values = self.metrics(self.run_pipeline(Path(tmp)))
        self.assertGreaterEqual(values['recall@1'], 0.70)
        self.assertGreaterEqual(values['recall@1'], 5 * values['random_recall@1'])

    def test_slices_beat_single_bev_under_seasonal_canopy(self):
        with tempfile.TemporaryDirectory() as tmp:
            multi = self.metrics(self.run_pipeline(Path(tmp) / 'multi', ['synth.seasonal=true']))
            single = self.metrics(self.run_pipeline(Path(tmp) / 'single', ['synth.seasonal=true', *self.SINGLE_BEV]))
        self.assertGreater(multi['recall@1'], single['recall@1'])
