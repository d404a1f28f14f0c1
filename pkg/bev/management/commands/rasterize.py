from pathlib import Path

from bev.export import stack_paths, write_stack
from bev.raster import BEV_MODES, make_bev_stack
from config.commands import PipelineCommand
from datasets.manifest import load_manifest


class Command(PipelineCommand):
    help = 'Rasterize the height slices of every submap into BEV images'

    def add_command_arguments(self, parser):
        parser.add_argument('--manifest', required=True, help='Input manifest (JSON lines)')
        parser.add_argument('--out', required=True, help='Output directory for BEV files')
        parser.add_argument('--bev-mode', choices=BEV_MODES, help='density (default) or elevation')
        parser.add_argument('--raw', action='store_true', help='Input clouds are not pre-processed yet')
        parser.add_argument('--no-pgm', action='store_true', help='Only write raw float32 images')

    def run(self, **options):
        extra = [f"bev.mode={options['bev_mode']}"] if options['bev_mode'] else []
        config = self.load_config(extra)
        manifest = load_manifest(options['manifest'])
        out_dir = Path(options['out'])
        self.output(out_dir / 'config.json')
        for record in manifest:
            for path in stack_paths(out_dir, record.id, config.bev.slices, pgm=not options['no_pgm']):
                self.output(path)

        def rasterize(record):
            cloud = self.prepared_cloud(manifest, record, config, preprocessed=not options['raw'])
            stack = make_bev_stack(cloud, config.bev)
            return write_stack(stack, out_dir, record.id, pgm=not options['no_pgm'])

        with self.stage('rasterize'):
            written = self.parallel_map(rasterize, list(manifest))
        out_dir.mkdir(parents=True, exist_ok=True)
        self.echo_config(config, out_dir)
        self.success(f'Wrote {sum(len(w) for w in written)} {config.bev.mode} images for {len(manifest)} submaps')
