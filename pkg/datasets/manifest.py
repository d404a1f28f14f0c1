"""
JSON-lines submap manifest: one object per submap.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from rest_framework.exceptions import ValidationError

from clouds.pcd_io import load_pcd
from clouds.pointcloud import PointCloud, Pose
from config.validation import flatten_errors
from forestlpr.exceptions import DatasetError

from .io import atomic_write_text
from .serializers import SubmapRecordSerializer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SubmapRecord:
    id: str
    sequence: str
    timestamp: float
    pcd: str
    pose: Pose

    @property
    def position(self) -> tuple[float, float]:
        return float(self.pose.translation[0]), float(self.pose.translation[1])

    def to_json(self) -> dict:
        return {
            'id': self.id,
            'sequence': self.sequence,
            'timestamp': self.timestamp,
            'pcd': self.pcd,
            'pose': list(self.pose.as_components()),
        }


class Manifest:
    """Ordered submap records plus the directory relative PCD paths resolve against."""

    def __init__(self, records, base_dir='.'):
        self.records = list(records)
        self.base_dir = Path(base_dir)
        self._by_id = {}
        for record in self.records:
            if record.id in self._by_id:
                raise DatasetError(f"duplicate submap id {record.id!r} in manifest")
            self._by_id[record.id] = record

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, submap_id) -> bool:
        return submap_id in self._by_id

    def get(self, submap_id) -> SubmapRecord:
        try:
            return self._by_id[submap_id]
        except KeyError:
            raise DatasetError(f"submap {submap_id!r} is not in the manifest") from None

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def sequences(self) -> list[str]:
        seen = []
        for record in self.records:
            if record.sequence not in seen:
                seen.append(record.sequence)
        return seen

    def for_sequence(self, sequence) -> list[SubmapRecord]:
        return [r for r in self.records if r.sequence == sequence]

    def pcd_path(self, record: SubmapRecord) -> Path:
        path = Path(record.pcd)
        return path if path.is_absolute() else self.base_dir / path

    def load_cloud(self, record: SubmapRecord) -> PointCloud:
        path = self.pcd_path(record)
        if not path.exists():
            raise DatasetError(f"PCD file {path} for submap {record.id!r} does not exist")
        return load_pcd(path)

    def check_files(self):
        missing = [r.id for r in self.records if not self.pcd_path(r).exists()]
        if missing:
            raise DatasetError(f"{len(missing)} manifest PCD files are missing (first: {missing[0]!r})")

    def to_jsonl(self) -> str:
        return ''.join(json.dumps(r.to_json(), sort_keys=True) + '\n' for r in self.records)

    def save(self, path) -> Path:
        return atomic_write_text(path, self.to_jsonl())


def parse_record(payload: dict, line_number: int = 0) -> SubmapRecord:
    serializer = SubmapRecordSerializer(data=payload)
    try:
        serializer.is_valid(raise_exception=True)
    except ValidationError as exc:
        raise DatasetError(f"manifest line {line_number}: {flatten_errors(exc.detail)}") from None
    data = serializer.validated_data
    return SubmapRecord(
        id=data['id'],
        sequence=data['sequence'],
        timestamp=data['timestamp'],
        pcd=data['pcd'],
        pose=Pose.from_components(*data['pose']),
    )


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest {path} does not exist")
    records = []
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"manifest line {number}: invalid JSON ({exc.msg})") from None
        records.append(parse_record(payload, number))
    logger.info(f"Loaded manifest {path} with {len(records)} submaps")
    return Manifest(records, base_dir=path.parent)
