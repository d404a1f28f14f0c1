import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from clouds.pointcloud import PointCloud, Pose, VoxelSet
from datasets.io import atomic_write_text
from datasets.manifest import Manifest, SubmapRecord
from forestlpr.exceptions import ConfigError, DatasetError, UndefinedMetricError
from mining.overlap import LabeledPair, MiningConfig, PairSet, _label, mine_pairs, overlap


def block(offset=(0.0, 0.0, 0.0), size=6):
    """Points at the centres of a size x size x 2 block of 0.5 m cells."""
    i, j, k = np.meshgrid(np.arange(size), np.arange(size), np.arange(2), indexing='ij')
    centres = np.column_stack([i.ravel(), j.ravel(), k.ravel()]) * 0.5 + 0.25
    return PointCloud(centres + np.asarray(offset))


class CloudManifest(Manifest):
    """Manifest whose clouds live in memory."""

    def __init__(self, entries):
        records = [
            SubmapRecord(id=sid, sequence=seq, timestamp=ts, pcd=f'{sid}.pcd', pose=Pose([x, 0.0, 0.0]))
            for sid, seq, ts, x, _ in entries
        ]
        super().__init__(records)
        self.clouds = {sid: cloud for sid, _, _, _, cloud in entries}

    def load_cloud(self, record):
        return self.clouds[record.id]


def labels(pairs):
    return {(p.query_id, p.other_id): p.label for p in pairs.pairs}


class OverlapTests(SimpleTestCase):

    def test_iou_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            a = VoxelSet(edge=1.0, cells=rng.integers(-4, 4, size=(rng.integers(1, 30), 3)))
            b = VoxelSet(edge=1.0, cells=rng.integers(-4, 4, size=(rng.integers(1, 30), 3)))
            first, second = a.cell_set(), b.cell_set()
            expected = len(first & second) / len(first | second)
            self.assertAlmostEqual(overlap(a, b), expected, places=12)

    def test_subset_scores_by_variant(self):
        a = VoxelSet(edge=1.0, cells=[[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
        b = VoxelSet(edge=1.0, cells=[[0, 0, 0], [1, 1, 0]])
        self.assertEqual(overlap(a, b, 'iou'), 0.5)
        self.assertEqual(overlap(a, b, 'min'), 1.0)

    def test_symmetric(self):
        a = VoxelSet(edge=1.0, cells=[[0, 0, 0], [5, 5, 5]])
        b = VoxelSet(edge=1.0, cells=[[0, 0, 0], [1, 2, 3], [2, 2, 2]])
        self.assertEqual(overlap(a, b), overlap(b, a))
        self.assertEqual(overlap(a, b, 'min'), overlap(b, a, 'min'))

    def test_empty_sets(self):
        empty = VoxelSet(edge=1.0, cells=np.zeros((0, 3)))
        with self.assertRaises(UndefinedMetricError):
            overlap(empty, empty)
        self.assertEqual(overlap(empty, VoxelSet(edge=1.0, cells=[[0, 0, 0]])), 0.0)

    def test_unknown_variant(self):
        a = VoxelSet(edge=1.0, cells=[[0, 0, 0]])
        with self.assertRaises(ConfigError):
            overlap(a, a, 'dice')


class LabelTests(SimpleTestCase):

    def test_overlap_thresholds_are_strict(self):
        cfg = MiningConfig()
        self.assertEqual(_label(0.95, cfg), 'pos')
        self.assertIsNone(_label(0.9, cfg))
        self.assertIsNone(_label(0.5, cfg))
        self.assertEqual(_label(0.49, cfg), 'neg')

    def test_distance_thresholds(self):
        cfg = MiningConfig(mode='distance')
        self.assertEqual(_label(3.0, cfg), 'pos')
        self.assertIsNone(_label(30.0, cfg))
        self.assertEqual(_label(50.5, cfg), 'neg')

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            MiningConfig(overlap_positive=0.4, overlap_negative=0.5)
        with self.assertRaises(ConfigError):
            MiningConfig(mode='radius')
        with self.assertRaises(ConfigError):
            MiningConfig(exclusion_window=-1)


class PairSetTests(SimpleTestCase):

    def test_lookups(self):
        pairs = PairSet([
            LabeledPair('b', 'a', 'pos', 1.0), LabeledPair('a', 'b', 'pos', 1.0),
            LabeledPair('a', 'c', 'neg', 0.0), LabeledPair('c', 'a', 'neg', 0.0),
        ])
        self.assertEqual([(p.query_id, p.other_id) for p in pairs.pairs],
                         [('a', 'b'), ('a', 'c'), ('b', 'a'), ('c', 'a')])
        self.assertEqual(pairs.positives_of('a'), ['b'])
        self.assertEqual(pairs.negatives_of('a'), ['c'])
        self.assertEqual(pairs.positives_of('z'), [])
        self.assertEqual(pairs.trainable_queries(), ['a'])
        self.assertEqual(pairs.count('pos'), 2)

    def test_invalid_pairs(self):
        with self.assertRaises(DatasetError):
            PairSet([LabeledPair('a', 'a', 'pos', 1.0)])
        with self.assertRaises(DatasetError):
            PairSet([LabeledPair('a', 'b', 'pos', 1.0), LabeledPair('a', 'b', 'neg', 0.0)])
        with self.assertRaises(DatasetError):
            PairSet([LabeledPair('a', 'b', 'maybe', 0.7)])

    def test_csv_round_trip(self):
        pairs = PairSet([LabeledPair('a', 'b', 'pos', 0.93), LabeledPair('b', 'a', 'pos', 0.93)])
        with tempfile.TemporaryDirectory() as tmp:
            path = pairs.save(Path(tmp) / 'pairs.csv')
            self.assertEqual(path.read_text().splitlines()[0], 'query_id,other_id,label,score')
            loaded = PairSet.load(path)
        self.assertEqual(loaded.pairs, pairs.pairs)

    def test_malformed_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = atomic_write_text(Path(tmp) / 'pairs.csv', 'query_id,other_id,label,score\na,b,pos,high\n')
            with self.assertRaisesRegex(DatasetError, ':2:'):
                PairSet.load(path)


class MinePairsTests(SimpleTestCase):

    def test_overlap_mode(self):
        manifest = CloudManifest([
            ('a', 'x', 0.0, 0.0, block()),
            ('b', 'x', 100.0, 0.0, block()),
            ('c', 'x', 1000.0, 0.0, block()),
            ('d', 'y', 0.0, 500.0, block()),
        ])
        pairs = mine_pairs(manifest, MiningConfig(), jobs=2)
        expected = {('a', 'c'): 'pos', ('b', 'c'): 'pos', ('a', 'd'): 'neg', ('b', 'd'): 'neg', ('c', 'd'): 'neg'}
        expected.update({(b, a): label for (a, b), label in expected.items()})
        self.assertEqual(labels(pairs), expected)

    def test_gate_skips_voxel_overlap(self):
        manifest = CloudManifest([
            ('a', 'x', 0.0, 0.0, block()),
            ('b', 'y', 0.0, 100.0, block(offset=(-100.0, 0.0, 0.0))),
        ])
        gated = mine_pairs(manifest, MiningConfig())
        self.assertEqual(labels(gated), {('a', 'b'): 'neg', ('b', 'a'): 'neg'})
        self.assertEqual(gated.pairs[0].score, 0.0)
        open_gate = mine_pairs(manifest, MiningConfig(gate=200.0))
        self.assertEqual(labels(open_gate), {('a', 'b'): 'pos', ('b', 'a'): 'pos'})

    def test_min_variant_accepts_partial_submaps(self):
        manifest = CloudManifest([
            ('a', 'x', 0.0, 0.0, block(size=6)),
            ('b', 'y', 0.0, 0.0, block(size=3)),
        ])
        self.assertEqual(labels(mine_pairs(manifest, MiningConfig()))[('a', 'b')], 'neg')
        self.assertEqual(labels(mine_pairs(manifest, MiningConfig(overlap_variant='min')))[('a', 'b')], 'pos')

    def test_empty_submaps_are_skipped(self):
        manifest = CloudManifest([
            ('a', 'x', 0.0, 0.0, PointCloud.empty()),
            ('b', 'y', 0.0, 0.0, PointCloud.empty()),
            ('c', 'z', 0.0, 0.0, block()),
        ])
        with self.assertLogs('mining.overlap', level='WARNING'):
            pairs = mine_pairs(manifest, MiningConfig())
        self.assertNotIn(('a', 'b'), labels(pairs))
        self.assertEqual(labels(pairs)[('a', 'c')], 'neg')

    def test_distance_mode(self):
        manifest = CloudManifest([
            ('a', 'x', 0.0, 0.0, block()),
            ('b', 'y', 0.0, 2.0, block()),
            ('c', 'z', 0.0, 30.0, block()),
            ('d', 'x', 10.0, 1.0, block()),
        ])
        cfg = MiningConfig(mode='distance', distance_positive=3.0, distance_negative=20.0)
        result = labels(mine_pairs(manifest, cfg))
        self.assertEqual(result[('a', 'b')], 'pos')
        self.assertEqual(result[('b', 'c')], 'neg')
        self.assertEqual(result[('b', 'd')], 'pos')
        self.assertNotIn(('a', 'd'), result)
