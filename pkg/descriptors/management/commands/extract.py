import time

import numpy as np

from bev.raster import make_bev_stack
from config.commands import PipelineCommand
from datasets.manifest import load_manifest
from descriptors.descriptor_io import save_descriptors
from descriptors.model_io import load_params
from descriptors.pipeline import describe
from forestlpr.exceptions import ConfigError


class Command(PipelineCommand):
    help = 'Compute a global descriptor for every submap of a manifest'

    def add_command_arguments(self, parser):
        parser.add_argument('--manifest', required=True, help='Input manifest (JSON lines)')
        parser.add_argument('--model', required=True, help='Model file')
        parser.add_argument('--out', required=True, help='Output descriptor file')
        parser.add_argument('--preprocessed', action='store_true', help='Manifest clouds are already pre-processed')

    def run(self, **options):
        config = self.load_config()
        out = self.output(options['out'])
        manifest = load_manifest(options['manifest'])
        model = load_params(options['model'])
        backbone = model.backbone.config
        if (backbone.height, backbone.width) != (config.bev.height, config.bev.width):
            raise ConfigError(f'model input {backbone.height}x{backbone.width} differs from bev output '
                              f'{config.bev.height}x{config.bev.width}')

        def extract(record):
            started = time.perf_counter()
            cloud = self.prepared_cloud(manifest, record, config, options['preprocessed'])
            stack = make_bev_stack(cloud, config.bev)
            rasterized = time.perf_counter()
            descriptor = describe(stack, model)
            return descriptor, rasterized - started, time.perf_counter() - rasterized

        with self.stage('extract'):
            results = self.parallel_map(extract, list(manifest))
        matrix = np.stack([r[0] for r in results]) if results else np.zeros((0, model.head.config.dim))
        save_descriptors(out, manifest.ids, matrix)
        self.echo_config(config, out)

        if options['timing'] and results:
            self.stdout.write(f'timing per_submap_bev {np.mean([r[1] for r in results]):.6f}')
            self.stdout.write(f'timing per_submap_descriptor {np.mean([r[2] for r in results]):.6f}')
        self.success(f'Wrote {matrix.shape[0]} descriptors of dimension {matrix.shape[1]} to {out}')
