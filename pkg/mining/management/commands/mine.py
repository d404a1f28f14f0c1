from config.commands import PipelineCommand
from datasets.manifest import load_manifest
from mining.overlap import MINING_MODES, OVERLAP_VARIANTS, mine_pairs


class Command(PipelineCommand):
    help = 'Label positive and negative submap pairs by voxel overlap or pose distance'

    def add_command_arguments(self, parser):
        parser.add_argument('--manifest', required=True, help='Manifest of raw submaps with poses')
        parser.add_argument('--out', required=True, help='Pair CSV (query_id, other_id, label, score)')
        parser.add_argument('--mode', choices=MINING_MODES, help='Override mining.mode')
        parser.add_argument('--variant', choices=OVERLAP_VARIANTS, help='Override mining.overlap_variant')

    def run(self, **options):
        extra = []
        if options['mode']:
            extra.append(f"mining.mode={options['mode']}")
        if options['variant']:
            extra.append(f"mining.overlap_variant={options['variant']}")
        config = self.load_config(extra)
        out = self.output(options['out'])
        manifest = load_manifest(options['manifest'])

        with self.stage('mine'):
            pairs = mine_pairs(manifest, config.mining, jobs=self.jobs)
        pairs.save(out)
        self.echo_config(config, out)

        positives, negatives = pairs.count('pos') // 2, pairs.count('neg') // 2
        if not positives:
            self.stdout.write(self.style.WARNING('No positive pairs were found'))
        self.success(f'Wrote {positives} positive and {negatives} negative pairs to {out}')
