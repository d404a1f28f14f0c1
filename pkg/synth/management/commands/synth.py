from pathlib import Path

from config.commands import PipelineCommand
from synth.sampling import sample_submaps
from synth.scene import generate_scene
from synth.writer import write_dataset


class Command(PipelineCommand):
    help = 'Generate a seeded synthetic forest dataset (PCD submaps, poses, manifest)'

    def add_command_arguments(self, parser):
        parser.add_argument('--seed', type=int, default=0, help='Scene seed')
        parser.add_argument('--out', required=True, help='Output dataset directory')
        parser.add_argument('--preset', choices=['dense', 'sparse'], help='Tree density preset')
        parser.add_argument('--seasonal', action='store_true', help='Resample the canopy on every pass')
        parser.add_argument('--blind-sector', type=float, default=None, metavar='DEGREES',
                            help='Width of a removed azimuth wedge')

    def run(self, **options):
        extra = []
        if options['preset']:
            extra.append(f"synth.preset={options['preset']}")
        if options['seasonal']:
            extra.append('synth.seasonal=true')
        if options['blind_sector'] is not None:
            extra.append(f"synth.blind_sector_width={options['blind_sector']}")
        config = self.load_config(extra)

        out_dir = Path(options['out'])
        self.output(out_dir / 'manifest.jsonl')
        with self.stage('scene'):
            scene = generate_scene(options['seed'], config.synth)
        with self.stage('sample'):
            submaps = sample_submaps(scene, jobs=self.jobs)
        with self.stage('write'):
            manifest = write_dataset(scene, submaps, out_dir)
            self.echo_config(config, out_dir)

        self.success(f'Wrote {len(manifest)} submaps ({scene.tree_count} trees) to {out_dir}')
