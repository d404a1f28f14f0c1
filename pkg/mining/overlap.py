"""
Ground-truth positive and negative pairs.

Overlap mode aligns every submap into the world frame with its pose,
voxelizes it and labels pairs by the overlap of their occupied cells.
Distance mode labels pairs by the distance between their poses.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np

from clouds.pointcloud import VoxelSet, transform, voxelize
from datasets.io import atomic_write_csv, read_csv
from forestlpr.exceptions import ConfigError, DatasetError, UndefinedMetricError

logger = logging.getLogger(__name__)

MINING_MODES = ('overlap', 'distance')
OVERLAP_VARIANTS = ('iou', 'min')
PAIR_FIELDS = ['query_id', 'other_id', 'label', 'score']


@dataclass(frozen=True)
class MiningConfig:
    mode: str = 'overlap'
    voxel: float = 0.5
    overlap_positive: float = 0.9
    overlap_negative: float = 0.5
    overlap_variant: str = 'iou'
    distance_positive: float = 12.5
    distance_negative: float = 50.0
    gate: float = 60.0
    exclusion_window: float = 600.0

    def __post_init__(self):
        if self.mode not in MINING_MODES:
            raise ConfigError(f"mining mode must be one of {MINING_MODES}, got {self.mode!r}")
        if self.overlap_variant not in OVERLAP_VARIANTS:
            raise ConfigError(f"overlap variant must be one of {OVERLAP_VARIANTS}, got {self.overlap_variant!r}")
        if not self.voxel > 0:
            raise ConfigError(f"voxel edge must be > 0, got {self.voxel}")
        if not 0 <= self.overlap_negative < self.overlap_positive <= 1:
            raise ConfigError("overlap thresholds must satisfy 0 <= negative < positive <= 1")
        if not 0 < self.distance_positive < self.distance_negative:
            raise ConfigError("distance thresholds must satisfy 0 < positive < negative")
        if not self.gate > 0:
            raise ConfigError(f"gate must be > 0, got {self.gate}")
        if self.exclusion_window < 0:
            raise ConfigError(f"exclusion window must be >= 0, got {self.exclusion_window}")

    def to_dict(self) -> dict:
        return asdict(self)


def overlap(first: VoxelSet, second: VoxelSet, variant: str = 'iou') -> float:
    """
    |A ∩ B| / |A ∪ B|, or |A ∩ B| / min(|A|, |B|) for the ``min`` variant.

    Raises UndefinedMetricError when both sets are empty.
    """
    if len(first) == 0 and len(second) == 0:
        raise UndefinedMetricError("overlap of two empty voxel sets is undefined")
    shared = first.intersection_size(second)
    if variant == 'iou':
        return shared / (len(first) + len(second) - shared)
    if variant == 'min':
        smaller = min(len(first), len(second))
        return shared / smaller if smaller else 0.0
    raise ConfigError(f"unknown overlap variant {variant!r}")


@dataclass(frozen=True)
class LabeledPair:
    query_id: str
    other_id: str
    label: str
    score: float

    def to_row(self) -> dict:
        return {'query_id': self.query_id, 'other_id': self.other_id, 'label': self.label, 'score': repr(float(self.score))}


class PairSet:
    """Labeled pairs, listed in both directions, sorted by (query, other)."""

    def __init__(self, pairs):
        self.pairs = sorted(pairs, key=lambda p: (p.query_id, p.other_id))
        self._positives, self._negatives = {}, {}
        for pair in self.pairs:
            if pair.label not in ('pos', 'neg'):
                raise DatasetError(f"pair label must be pos or neg, got {pair.label!r}")
            if pair.query_id == pair.other_id:
                raise DatasetError(f"submap {pair.query_id!r} is paired with itself")
            target = self._positives if pair.label == 'pos' else self._negatives
            target.setdefault(pair.query_id, []).append(pair.other_id)
        for query in set(self._positives) & set(self._negatives):
            clash = set(self._positives[query]) & set(self._negatives[query])
            if clash:
                raise DatasetError(f"{query!r} has {sorted(clash)[0]!r} as both positive and negative")

    def __len__(self) -> int:
        return len(self.pairs)

    def positives_of(self, query_id: str) -> list[str]:
        return self._positives.get(query_id, [])

    def negatives_of(self, query_id: str) -> list[str]:
        return self._negatives.get(query_id, [])

    def count(self, label: str) -> int:
        return sum(1 for p in self.pairs if p.label == label)

    def trainable_queries(self) -> list[str]:
        """Queries with at least one positive and one negative."""
        return sorted(set(self._positives) & set(self._negatives))

    def save(self, path):
        return atomic_write_csv(path, PAIR_FIELDS, [p.to_row() for p in self.pairs])

    @classmethod
    def load(cls, path) -> PairSet:
        pairs = []
        for number, row in enumerate(read_csv(path), start=2):
            try:
                pairs.append(LabeledPair(row['query_id'], row['other_id'], row['label'], float(row['score'])))
            except (KeyError, TypeError, ValueError):
                raise DatasetError(f"{path}:{number}: malformed pair row") from None
        return cls(pairs)


def _excluded(first, second, window: float) -> bool:
    return first.sequence == second.sequence and abs(first.timestamp - second.timestamp) < window


def _label(score: float, cfg: MiningConfig) -> str | None:
    if cfg.mode == 'overlap':
        if score > cfg.overlap_positive:
            return 'pos'
        return 'neg' if score < cfg.overlap_negative else None
    if score < cfg.distance_positive:
        return 'pos'
    return 'neg' if score > cfg.distance_negative else None


def world_voxels(manifest, record, edge: float) -> VoxelSet:
    return voxelize(transform(manifest.load_cloud(record), record.pose), edge)


def mine_pairs(manifest, cfg: MiningConfig, jobs: int = 1) -> PairSet:
    """
    Label every unordered pair of submaps once and list it in both directions.

    Same-sequence pairs closer in time than the exclusion window are skipped.
    In overlap mode, pairs whose poses are farther apart than ``gate`` in x-y
    score 0 without voxelization.
    """
    records = sorted(manifest, key=lambda r: r.id)
    for record in records:
        if record.pose is None:
            raise DatasetError(f"submap {record.id!r} has no pose")
    candidates = [(a, b) for a, b in combinations(records, 2) if not _excluded(a, b, cfg.exclusion_window)]

    if cfg.mode == 'distance':
        scores = [float(np.linalg.norm(a.pose.translation - b.pose.translation)) for a, b in candidates]
    else:
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            voxels = dict(zip([r.id for r in records], pool.map(lambda r: world_voxels(manifest, r, cfg.voxel), records)))

        def score(pair) -> float | None:
            a, b = pair
            gap = np.hypot(*(a.pose.translation[:2] - b.pose.translation[:2]))
            if gap > cfg.gate:
                return 0.0
            try:
                return overlap(voxels[a.id], voxels[b.id], cfg.overlap_variant)
            except UndefinedMetricError:
                logger.warning(f"Skipping pair {a.id}/{b.id}: both submaps are empty")
                return None

        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            scores = list(pool.map(score, candidates))

    pairs = []
    for (a, b), value in zip(candidates, scores):
        label = None if value is None else _label(value, cfg)
        if label is None:
            continue
        pairs.append(LabeledPair(a.id, b.id, label, value))
        pairs.append(LabeledPair(b.id, a.id, label, value))
    result = PairSet(pairs)
    logger.info(
        f"Mined {result.count('pos') // 2} positive and {result.count('neg') // 2} negative pairs "
        f"from {len(records)} submaps ({cfg.mode} mode)"
    )
    return result
