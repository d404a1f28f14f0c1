"""
Shared base for the pipeline management commands.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from clouds.pointcloud import PointCloud
from datasets.io import atomic_write_json, ensure_writable
from forestlpr.exceptions import ForestLPRError
from terrain.normalize import preprocess

from .utils import load_run_config

logger = logging.getLogger(__name__)


def command_error(exc: Exception) -> CommandError:
    message = ' '.join(str(exc).split())
    return CommandError(f"error={type(exc).__name__} message={message}")


class PipelineCommand(BaseCommand):
    """
    Adds ``--config``/``--set``/``--overwrite``/``--jobs``/``--timing`` and
    turns pipeline errors into one-line ``error=<Class> message=<text>``
    command errors. Subclasses implement ``add_command_arguments`` and ``run``.
    """

    uses_config = True

    def add_arguments(self, parser):
        if self.uses_config:
            parser.add_argument('--config', help='JSON run config (default: FORESTLPR_CONFIG)')
            parser.add_argument('--set', dest='overrides', action='append', default=[],
                                metavar='SECTION.KEY=VALUE', help='Override one config key (repeatable)')
        parser.add_argument('--overwrite', action='store_true', help='Replace existing outputs')
        parser.add_argument('--jobs', type=int, default=None, help='Worker threads')
        parser.add_argument('--timing', action='store_true', help='Print per-stage wall-clock times')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        self.options = options
        self.jobs = max(1, options.get('jobs') or settings.FORESTLPR['DEFAULT_JOBS'])
        try:
            return self.run(**options)
        except (ForestLPRError, OSError) as exc:
            raise command_error(exc) from exc

    def run(self, **options):
        raise NotImplementedError

    def load_config(self, extra_overrides=()):
        overrides = list(extra_overrides) + list(self.options.get('overrides') or [])
        return load_run_config(self.options.get('config'), overrides)

    def output(self, path) -> Path:
        return ensure_writable(path, self.options.get('overwrite', False))

    def echo_config(self, config, target):
        """Write the effective config next to a file output, or into an output directory."""
        target = Path(target)
        path = target / 'config.json' if target.is_dir() else target.with_name(target.name + '.config.json')
        atomic_write_json(path, config.as_dict())

    def parallel_map(self, fn, items) -> list:
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(fn, items))

    @contextmanager
    def stage(self, name: str):
        started = time.perf_counter()
        yield
        elapsed = time.perf_counter() - started
        logger.debug(f"stage {name} took {elapsed:.3f}s")
        if self.options.get('timing'):
            self.stdout.write(f'timing {name} {elapsed:.6f}')

    def prepared_cloud(self, manifest, record, config, preprocessed: bool) -> PointCloud:
        cloud = manifest.load_cloud(record)
        return cloud if preprocessed else preprocess(cloud, config.preprocess)

    def success(self, message: str):
        self.stdout.write(self.style.SUCCESS(message))
