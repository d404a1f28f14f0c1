import json
import tempfile
from io import StringIO
from pathlib import Path

from django.conf import settings
from django.core.management import CommandError, call_command
from django.db import connections
from django.test import SimpleTestCase

from clouds.pcd_io import save_pcd
from clouds.pointcloud import PointCloud, Pose
from config.commands import command_error
from config.utils import (
    TOY_DOCUMENT, RunConfig, apply_overrides, build_run_config, default_document, load_run_config, parse_override,
    read_document,
)
from datasets.manifest import Manifest, SubmapRecord
from forestlpr.exceptions import ConfigError, DatasetError

CONFIGS = settings.BASE_DIR / 'configs'


class RunConfigTests(SimpleTestCase):

    def test_empty_document_gives_defaults(self):
        self.assertEqual(build_run_config({}), RunConfig())

    def test_expanded_document_round_trips(self):
        config = build_run_config(TOY_DOCUMENT)
        self.assertEqual(build_run_config(config.as_dict()), config)
        self.assertEqual(config.backbone.levels, (2, 3, 4))
        self.assertEqual(config.bev.grid, 64)

    def test_shipped_configs_match_defaults(self):
        self.assertEqual(build_run_config(read_document(CONFIGS / 'default.json')), RunConfig())
        self.assertEqual(build_run_config(read_document(CONFIGS / 'toy.json')), build_run_config(TOY_DOCUMENT))

    def test_unknown_keys(self):
        with self.assertRaisesRegex(ConfigError, 'colour: unknown key'):
            build_run_config({'colour': {}})
        with self.assertRaisesRegex(ConfigError, r'bev\.colour: unknown key'):
            build_run_config({'bev': {'colour': 'green'}})

    def test_section_constraints(self):
        with self.assertRaisesRegex(ConfigError, 'mining: overlap thresholds'):
            build_run_config({'mining': {'overlap_positive': 0.3, 'overlap_negative': 0.5}})
        with self.assertRaisesRegex(ConfigError, 'head.fusion'):
            build_run_config({'head': {'fusion': 'sum'}})

    def test_cross_section_checks(self):
        with self.assertRaisesRegex(ConfigError, 'backbone: input 64x64 must equal bev output 480x480'):
            build_run_config({'backbone': {'preset': 'toy'}})
        with self.assertRaisesRegex(ConfigError, 'concat'):
            build_run_config({'head': {'fusion': 'concat'}})
        concat = build_run_config({'head': {'fusion': 'concat'}, 'backbone': {'in_channels': 5}})
        self.assertEqual(concat.backbone.in_channels, 5)

    def test_presets_fill_omitted_keys(self):
        config = build_run_config({'bev': {'preset': 'coarse', 'slice_height': 2.0}, 'synth': {'preset': 'sparse'}})
        self.assertEqual((config.bev.slices, config.bev.slice_height), (2, 2.0))
        self.assertEqual(config.synth.tree_density, 0.005)

    def test_missing_or_broken_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaisesRegex(ConfigError, 'does not exist'):
                load_run_config(Path(tmp) / 'missing.json')
            broken = Path(tmp) / 'broken.json'
            broken.write_text('{"bev": ')
            with self.assertRaisesRegex(ConfigError, 'not valid JSON'):
                load_run_config(broken)
            broken.write_text('[1, 2]')
            with self.assertRaisesRegex(ConfigError, 'JSON object'):
                load_run_config(broken)


class OverrideTests(SimpleTestCase):

    def test_parse_values(self):
        self.assertEqual(parse_override('train.lr=0.5'), ('train', 'lr', 0.5))
        self.assertEqual(parse_override('synth.seasonal=true'), ('synth', 'seasonal', True))
        self.assertEqual(parse_override('head.fusion=max'), ('head', 'fusion', 'max'))
        self.assertEqual(parse_override('eval.radii=[1, 2]'), ('eval', 'radii', [1, 2]))
        for bad in ('lr=3', 'train.lr', '.lr=3', 'train.=3'):
            with self.assertRaises(ConfigError):
                parse_override(bad)

    def test_later_overrides_win(self):
        merged = apply_overrides({'train': {'lr': 0.1}}, ['train.lr=0.2', 'train.lr=0.3'])
        self.assertEqual(merged['train']['lr'], 0.3)

    def test_overrides_do_not_touch_the_input(self):
        document = {'train': {'lr': 0.1}}
        apply_overrides(document, ['train.lr=0.2'])
        self.assertEqual(document, {'train': {'lr': 0.1}})

    def test_preset_override_replaces_expanded_keys(self):
        document = default_document('toy')
        config = build_run_config(apply_overrides(document, ['bev.preset=fine']))
        self.assertEqual((config.bev.slices, config.bev.slice_height), (10, 0.5))
        config = build_run_config(apply_overrides(document, ['bev.preset=fine', 'bev.slices=3']))
        self.assertEqual((config.bev.slices, config.bev.slice_height), (3, 0.5))

    def test_section_must_be_an_object(self):
        with self.assertRaises(ConfigError):
            apply_overrides({'train': 3}, ['train.lr=0.1'])


class CommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_error_format(self):
        error = command_error(DatasetError('first line\n   second line'))
        self.assertEqual(str(error), 'error=DatasetError message=first line second line')

    def test_init_config(self):
        out = self.root / 'toy.json'
        stdout = StringIO()
        call_command('init_config', '--out', str(out), '--preset', 'toy', stdout=stdout)
        self.assertEqual(json.loads(out.read_text()), default_document('toy'))
        self.assertEqual(load_run_config(out), build_run_config(TOY_DOCUMENT))
        self.assertIn('sections: backbone, bev, eval', stdout.getvalue())
        with self.assertRaisesRegex(CommandError, '^error=DatasetError'):
            call_command('init_config', '--out', str(out), stdout=StringIO())
        call_command('init_config', '--out', str(out), '--overwrite', stdout=StringIO())
        self.assertEqual(load_run_config(out), RunConfig())

    def test_invalid_override_is_reported(self):
        with self.assertRaisesRegex(CommandError, r'^error=ConfigError message=mining\.voxel'):
            call_command('mine', '--config', str(CONFIGS / 'toy.json'), '--set', 'mining.voxel=oops',
                         '--manifest', str(self.root / 'm.jsonl'), '--out', str(self.root / 'pairs.csv'),
                         stdout=StringIO())

    def test_set_wins_over_command_flags(self):
        records = []
        for index, (sequence, x) in enumerate((('a', 0.0), ('b', 2.0), ('c', 40.0))):
            save_pcd(PointCloud([[0.25, 0.25, 1.0]]), self.root / f'{index}.pcd')
            records.append(SubmapRecord(f'{sequence}_0000', sequence, 0.0, f'{index}.pcd', Pose([x, 0.0, 0.0])))
        Manifest(records).save(self.root / 'manifest.jsonl')
        out = self.root / 'pairs.csv'
        stdout = StringIO()
        call_command('mine', '--config', str(CONFIGS / 'toy.json'), '--mode', 'overlap',
                     '--set', 'mining.mode=distance', '--manifest', str(self.root / 'manifest.jsonl'),
                     '--out', str(out), stdout=stdout)
        echoed = json.loads((self.root / 'pairs.csv.config.json').read_text())
        self.assertEqual(echoed['mining']['mode'], 'distance')
        self.assertIn('Wrote 1 positive and 2 negative pairs', stdout.getvalue())


class SettingsTests(SimpleTestCase):

    def test_no_database_is_configured(self):
        self.assertEqual(settings.DATABASES, {})
        self.assertEqual(connections.settings['default']['ENGINE'], 'django.db.backends.dummy')
