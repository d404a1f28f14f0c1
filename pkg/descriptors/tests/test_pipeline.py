import csv
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from bev.raster import BevStack, DensityImage
from descriptors.descriptor_io import load_descriptors, save_descriptors, sidecar_path
from descriptors.model_io import MAGIC, load_params, model_bytes, parse_model, save_params
from descriptors.pipeline import (
    describe, describe_graph, describe_single_slices, export_weights, slice_weight_table,
)
from forestlpr.exceptions import ConfigError, DatasetError, ModelFormatError

from .helpers import random_slices, tiny_model


def stack_of(array):
    images = tuple(DensityImage(a, 1.0, 4.0) for a in array)
    return BevStack(images=images, bands=tuple((1.0 + j, 2.0 + j) for j in range(len(images))))


class DescribeTests(SimpleTestCase):

    def test_unit_norm_descriptor(self):
        model = tiny_model()
        descriptor = describe(stack_of(random_slices()), model)
        self.assertEqual(descriptor.shape, (16,))
        self.assertLess(abs(np.linalg.norm(descriptor) - 1.0), 1e-6)

    def test_single_slice_matches_single_bev_path(self):
        model = tiny_model()
        image = random_slices(slices=1)
        fused = describe_graph(image, model).data
        single = describe_single_slices(image, model)[0].data
        self.assertTrue(np.array_equal(fused, single))

    def test_every_fusion_mode_describes(self):
        images = random_slices()
        for fusion in ('interaction', 'max', 'no_interaction', 'concat'):
            descriptor = describe(images, tiny_model(fusion=fusion))
            self.assertLess(abs(np.linalg.norm(descriptor) - 1.0), 1e-6, fusion)

    def test_concat_needs_matching_channels(self):
        with self.assertRaises(ConfigError):
            describe(random_slices(slices=2), tiny_model(fusion='concat', slices=3))

    def test_describe_records_no_tape(self):
        model = tiny_model()
        describe(random_slices(), model)
        self.assertTrue(all(t.grad is None for t in model.parameters()))

    def test_deterministic_initialization(self):
        first, second = tiny_model(seed=3), tiny_model(seed=3)
        for a, b in zip(first.parameters(), second.parameters()):
            np.testing.assert_array_equal(a.data, b.data)


class SliceWeightTests(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_one_row_per_patch(self):
        rows = slice_weight_table(random_slices(), tiny_model())
        self.assertEqual([(r['patch_row'], r['patch_col']) for r in rows], [(0, 0), (0, 1), (1, 0), (1, 1)])
        for row in rows:
            self.assertAlmostEqual(sum(float(row[f'w_{j}']) for j in (1, 2, 3)), 1.0, places=6)

    def test_export_writes_csv(self):
        path = export_weights(stack_of(random_slices()), tiny_model(), self.tmp / 'weights.csv')
        with open(path, newline='') as handle:
            reader = csv.DictReader(handle)
            self.assertEqual(reader.fieldnames, ['patch_row', 'patch_col', 'w_1', 'w_2', 'w_3'])
            self.assertEqual(len(list(reader)), 4)

    def test_max_fusion_has_no_weights(self):
        with self.assertRaises(ConfigError):
            slice_weight_table(random_slices(), tiny_model(fusion='max'))


class ModelFileTests(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.model = tiny_model()

    def tearDown(self):
        self._tmp.cleanup()

    def test_round_trip_stores_float32(self):
        path = save_params(self.model, self.tmp / 'model.bin')
        loaded = load_params(path)
        self.assertEqual(loaded.parameter_names(), self.model.parameter_names())
        self.assertEqual(loaded.backbone.config, self.model.backbone.config)
        self.assertEqual(loaded.head.config, self.model.head.config)
        for a, b in zip(loaded.parameters(), self.model.parameters()):
            np.testing.assert_array_equal(a.data, b.data.astype(np.float32).astype(np.float64))
        np.testing.assert_allclose(describe(random_slices(), loaded), describe(random_slices(), self.model), atol=1e-5)

    def test_bad_magic(self):
        with self.assertRaises(ModelFormatError):
            parse_model(b'NOT-A-MODEL' + model_bytes(self.model))

    def test_version_mismatch(self):
        raw = bytearray(model_bytes(self.model))
        raw[len(MAGIC)] = 2
        with self.assertRaisesRegex(ModelFormatError, 'version 2'):
            parse_model(bytes(raw))

    def test_truncated_and_trailing(self):
        raw = model_bytes(self.model)
        with self.assertRaises(ModelFormatError):
            parse_model(raw[:-3])
        with self.assertRaises(ModelFormatError):
            parse_model(raw + b'\x00')

    def test_missing_file(self):
        with self.assertRaises(ModelFormatError):
            load_params(self.tmp / 'absent.bin')


class DescriptorFileTests(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_round_trip_with_sidecar(self):
        matrix = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
        path = save_descriptors(self.tmp / 'd.bin', ['a', 'b', 'c'], matrix)
        self.assertTrue(sidecar_path(path).exists())
        ids, loaded = load_descriptors(path)
        self.assertEqual(ids, ['a', 'b', 'c'])
        np.testing.assert_allclose(loaded, matrix, atol=1e-7)

    def test_missing_sidecar(self):
        path = save_descriptors(self.tmp / 'd.bin', ['a'], np.ones((1, 2)))
        sidecar_path(path).unlink()
        with self.assertRaises(DatasetError):
            load_descriptors(path)

    def test_count_mismatch(self):
        with self.assertRaises(DatasetError):
            save_descriptors(self.tmp / 'd.bin', ['a', 'b'], np.ones((1, 2)))

    def test_truncated_body(self):
        path = save_descriptors(self.tmp / 'd.bin', ['a'], np.ones((1, 4)))
        path.write_bytes(path.read_bytes()[:-2])
        with self.assertRaises(ModelFormatError):
            load_descriptors(path)
