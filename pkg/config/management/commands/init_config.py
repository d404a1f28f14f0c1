from config.commands import PipelineCommand
from config.utils import default_document
from datasets.io import atomic_write_json


class Command(PipelineCommand):
    help = 'Write a fully populated run config'
    uses_config = False

    def add_command_arguments(self, parser):
        parser.add_argument('--out', required=True, help='Output JSON file')
        parser.add_argument('--preset', choices=['default', 'toy'], default='default')

    def run(self, **options):
        out = self.output(options['out'])
        document = default_document(options['preset'])
        atomic_write_json(out, document)
        self.stdout.write(f"  sections: {', '.join(sorted(document))}")
        self.success(f"Wrote {options['preset']} config to {out}")
