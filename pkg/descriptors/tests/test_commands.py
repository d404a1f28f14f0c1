import csv
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from descriptors.backbone import BackboneConfig
from descriptors.head import HeadConfig
from descriptors.model_io import save_params
from descriptors.pipeline import DescriptorModel
from terrain.tests import write_raw_manifest

TOY_CONFIG = str(settings.BASE_DIR / 'configs' / 'toy.json')


class ExportWeightsCommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.manifest = write_raw_manifest(self.root)
        self.model = save_params(
            DescriptorModel.initialize(BackboneConfig.from_preset('toy'), HeadConfig(dim=256)),
            self.root / 'model.bin',
        )

    def export(self, *args):
        stdout = StringIO()
        call_command('export_weights', '--config', TOY_CONFIG, '--manifest', str(self.manifest),
                     '--model', str(self.model), '--out', str(self.root / 'weights.csv'), *args, stdout=stdout)
        return stdout.getvalue()

    def test_one_row_per_patch_with_convex_weights(self):
        message = self.export('--submap', 'plot_0000')
        with (self.root / 'weights.csv').open(newline='') as handle:
            reader = csv.DictReader(handle)
            rows = list(reader)
        self.assertEqual(reader.fieldnames, ['patch_row', 'patch_col', 'w_1', 'w_2', 'w_3', 'w_4', 'w_5'])
        self.assertEqual(len(rows), 64)
        self.assertEqual((rows[9]['patch_row'], rows[9]['patch_col']), ('1', '1'))
        sums = [sum(float(row[f'w_{j}']) for j in range(1, 6)) for row in rows]
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)
        self.assertIn('Wrote slice weights of plot_0000', message)

    def test_unknown_submap_is_reported(self):
        with self.assertRaisesMessage(CommandError, 'error=DatasetError'):
            self.export('--submap', 'plot_9999')
        self.assertFalse((self.root / 'weights.csv').exists())
