from bev.raster import make_bev_stack
from config.commands import PipelineCommand
from datasets.manifest import load_manifest
from descriptors.model_io import load_params
from descriptors.pipeline import export_weights


class Command(PipelineCommand):
    help = 'Write the per-patch slice weights of one submap as CSV'

    def add_command_arguments(self, parser):
        parser.add_argument('--manifest', required=True, help='Input manifest (JSON lines)')
        parser.add_argument('--model', required=True, help='Model file')
        parser.add_argument('--submap', required=True, help='Submap id')
        parser.add_argument('--out', required=True, help='Output CSV')
        parser.add_argument('--preprocessed', action='store_true', help='Manifest clouds are already pre-processed')

    def run(self, **options):
        config = self.load_config()
        out = self.output(options['out'])
        manifest = load_manifest(options['manifest'])
        model = load_params(options['model'])
        record = manifest.get(options['submap'])

        with self.stage('weights'):
            cloud = self.prepared_cloud(manifest, record, config, options['preprocessed'])
            export_weights(make_bev_stack(cloud, config.bev), model, out)
        self.success(f'Wrote slice weights of {record.id} to {out}')
