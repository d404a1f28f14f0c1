"""
Write synthetic submaps in the same on-disk layout as converted real data.
"""
from __future__ import annotations

import logging
from pathlib import Path

from clouds.pcd_io import save_pcd, save_poses
from datasets.io import atomic_write_json
from datasets.manifest import Manifest, SubmapRecord

from .scene import ForestScene

logger = logging.getLogger(__name__)


def write_dataset(scene: ForestScene, submaps, out_dir) -> Manifest:
    """
    Layout: ``pcd/<id>.pcd``, ``poses.txt``, ``manifest.jsonl`` and
    ``scene.json`` (seed, parameters, tree count, visit per submap).
    """
    out_dir = Path(out_dir)
    records = []
    for submap in submaps:
        relative = Path('pcd') / f'{submap.id}.pcd'
        save_pcd(submap.cloud, out_dir / relative)
        records.append(SubmapRecord(submap.id, submap.sequence, submap.timestamp, relative.as_posix(), submap.pose))
    save_poses([(s.timestamp, s.pose) for s in submaps], out_dir / 'poses.txt')
    manifest = Manifest(records, base_dir=out_dir)
    manifest.save(out_dir / 'manifest.jsonl')
    atomic_write_json(out_dir / 'scene.json', {
        'seed': scene.seed,
        'params': scene.params.to_dict(),
        'trees': scene.tree_count,
        'visits': {s.id: s.visit for s in submaps},
    })
    logger.info(f"Wrote {len(records)} synthetic submaps to {out_dir}")
    return manifest
