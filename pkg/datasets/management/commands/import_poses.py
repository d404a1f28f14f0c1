import os
from pathlib import Path

from clouds.pcd_io import load_poses
from config.commands import PipelineCommand
from datasets.manifest import Manifest, SubmapRecord
from forestlpr.exceptions import DatasetError


class Command(PipelineCommand):
    help = 'Build a manifest from a pose file and a directory of PCD submaps'
    uses_config = False

    def add_command_arguments(self, parser):
        parser.add_argument('--poses', required=True, help='Pose file (timestamp tx ty tz qx qy qz qw per line)')
        parser.add_argument('--pcd-dir', required=True, help='Directory of .pcd files, one per pose in name order')
        parser.add_argument('--sequence', required=True, help='Sequence name for every record')
        parser.add_argument('--out', required=True, help='Output manifest (JSON lines)')

    def run(self, **options):
        out = self.output(options['out'])
        poses = load_poses(options['poses'])
        pcd_dir = Path(options['pcd_dir'])
        if not pcd_dir.is_dir():
            raise DatasetError(f"PCD directory {pcd_dir} does not exist")
        files = sorted(pcd_dir.glob('*.pcd'))
        if len(files) != len(poses):
            raise DatasetError(f"{len(files)} PCD files but {len(poses)} poses in {options['poses']}")

        sequence = options['sequence']
        records = []
        for index, (path, (timestamp, pose)) in enumerate(zip(files, poses)):
            relative = Path(os.path.relpath(path.resolve(), out.parent.resolve())).as_posix()
            records.append(SubmapRecord(f"{sequence}_{index:04d}", sequence, timestamp, relative, pose))
        Manifest(records, base_dir=out.parent).save(out)
        self.success(f'Wrote {len(records)} records of sequence {sequence} to {out}')
