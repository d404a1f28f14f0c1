from pathlib import Path

from config.commands import PipelineCommand
from datasets.manifest import Manifest, load_manifest
from descriptors.descriptor_io import load_descriptors
from evaluation.protocols import evaluate_inter, evaluate_intra
from evaluation.reports import write_curve, write_report


class Command(PipelineCommand):
    help = 'Evaluate descriptors with the intra-sequence or inter-sequence protocol'

    def add_command_arguments(self, parser):
        parser.add_argument('--descriptors', required=True, help='Descriptor file from the extract command')
        parser.add_argument('--manifest', required=True, action='append', help='Manifest(s) covering the descriptors')
        parser.add_argument('--protocol', choices=['intra', 'inter'], default='intra')
        parser.add_argument('--out', required=True, help='Report CSV (protocol, pair, metric, value)')
        parser.add_argument('--curve', help='Recall@1-versus-radius CSV (intra only)')
        parser.add_argument('--query-sequence', action='append', help='Restrict query sequences')
        parser.add_argument('--database-sequence', action='append', help='Restrict database sequences (inter only)')

    def run(self, **options):
        config = self.load_config()
        out = self.output(options['out'])
        manifests = [load_manifest(path) for path in options['manifest']]
        manifest = manifests[0] if len(manifests) == 1 else Manifest([r for m in manifests for r in m])
        ids, matrix = load_descriptors(options['descriptors'])

        with self.stage('evaluate'):
            if options['protocol'] == 'intra':
                report = evaluate_intra(manifest, ids, matrix, config.eval, options['query_sequence'], jobs=self.jobs)
            else:
                report = evaluate_inter(manifest, ids, matrix, config.eval, options['query_sequence'],
                                        options['database_sequence'], jobs=self.jobs)
        write_report(report, out)
        curve = options['curve'] or (Path(options['out']).with_name(Path(options['out']).stem + '_radius.csv')
                                     if options['protocol'] == 'intra' else None)
        if curve:
            write_curve(report, self.output(curve))
        self.echo_config(config, out)

        for row in report.rows:
            if row['metric'] in ('recall@1', 'max_f1', 'mrr'):
                self.stdout.write(f"{row['protocol']} {row['pair']} {row['metric']} {row['value']:.4f}")
        self.success(f'Wrote {len(report.rows)} report rows to {out}')
