from pathlib import Path

from config.commands import PipelineCommand
from datasets.manifest import load_manifest
from descriptors.model_io import load_params, save_params
from descriptors.pipeline import DescriptorModel
from forestlpr.exceptions import ConfigError
from mining.overlap import PairSet
from training.trainer import train, write_loss_curve


class Command(PipelineCommand):
    help = 'Train the descriptor model with the two-stage triplet schedule'

    def add_command_arguments(self, parser):
        parser.add_argument('--manifest', required=True, help='Manifest of the training submaps')
        parser.add_argument('--pairs', required=True, help='Pair CSV written by the mine command')
        parser.add_argument('--out', required=True, help='Output model file')
        parser.add_argument('--curve', help='Loss curve CSV (default: <out>.loss.csv)')
        parser.add_argument('--init-model', help='Start from an existing model file')
        parser.add_argument('--preprocessed', action='store_true', help='Manifest clouds are already pre-processed')

    def run(self, **options):
        config = self.load_config()
        out = self.output(options['out'])
        curve_path = self.output(options['curve'] or Path(options['out']).with_name(Path(options['out']).name + '.loss.csv'))
        manifest = load_manifest(options['manifest'])
        pairs = PairSet.load(options['pairs'])

        if options['init_model']:
            model = load_params(options['init_model'])
            if model.backbone.config != config.backbone or model.head.config != config.head:
                raise ConfigError('--init-model architecture differs from the run config')
        else:
            model = DescriptorModel.initialize(config.backbone, config.head, seed=config.train.seed)

        with self.stage('prepare'):
            records = list(manifest)
            clouds = dict(zip(
                [r.id for r in records],
                self.parallel_map(lambda r: self.prepared_cloud(manifest, r, config, options['preprocessed']), records),
            ))

        def report(epoch, stage, loss):
            self.stdout.write(f'stage {stage} epoch {epoch} mean_loss {loss:.6f}')

        with self.stage('train'):
            result = train(model, clouds, pairs, config.train, config.bev, jobs=self.jobs, progress=report)
        save_params(result.model, out)
        write_loss_curve(result, curve_path)
        self.echo_config(config, out)
        self.success(f'Saved model ({result.model.count()} parameters) to {out}')
