from pathlib import Path

from clouds.pcd_io import save_pcd
from config.commands import PipelineCommand
from datasets.manifest import Manifest, SubmapRecord, load_manifest


class Command(PipelineCommand):
    help = 'Segment ground, normalize heights and crop the trunk band of every submap'

    def add_command_arguments(self, parser):
        parser.add_argument('--manifest', required=True, help='Input manifest (JSON lines)')
        parser.add_argument('--out', required=True, help='Output directory for pre-processed PCDs')

    def run(self, **options):
        config = self.load_config()
        manifest = load_manifest(options['manifest'])
        out_dir = Path(options['out'])
        self.output(out_dir / 'manifest.jsonl')

        def process(record):
            cloud = self.prepared_cloud(manifest, record, config, preprocessed=False)
            relative = Path('pcd') / f'{record.id}.pcd'
            save_pcd(cloud, out_dir / relative)
            return SubmapRecord(record.id, record.sequence, record.timestamp, relative.as_posix(), record.pose), len(cloud)

        with self.stage('preprocess'):
            results = self.parallel_map(process, list(manifest))
        output = Manifest([record for record, _ in results], base_dir=out_dir)
        output.save(out_dir / 'manifest.jsonl')
        self.echo_config(config, out_dir)

        empty = sum(1 for _, count in results if count == 0)
        if empty:
            self.stdout.write(self.style.WARNING(f'{empty} submaps have no points left in the trunk band'))
        self.success(f'Pre-processed {len(output)} submaps into {out_dir}')
