"""
Exhaustive cosine retrieval over a descriptor database.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from forestlpr.exceptions import ConfigError, DatasetError, NumericError

NORM_TOLERANCE = 1e-5
SEARCH_MODES = ('intra', 'inter')


@dataclass(frozen=True)
class EntryMeta:
    id: str
    sequence: str
    timestamp: float
    x: float
    y: float

    @classmethod
    def from_record(cls, record) -> EntryMeta:
        x, y = record.position
        return cls(record.id, record.sequence, float(record.timestamp), x, y)

    def distance_to(self, other: EntryMeta) -> float:
        return float(np.hypot(self.x - other.x, self.y - other.y))


@dataclass(frozen=True)
class Candidate:
    row: int
    id: str
    distance: float

    @property
    def similarity(self) -> float:
        return 1.0 - self.distance


class RetrievalIndex:
    """Unit-norm descriptor rows with their submap metadata; read-only after construction."""

    def __init__(self, descriptors, metadata):
        matrix = np.array(descriptors, dtype=np.float64, ndmin=2)
        self.metadata = list(metadata)
        if matrix.shape[0] != len(self.metadata):
            raise DatasetError(f"{matrix.shape[0]} descriptors for {len(self.metadata)} metadata rows")
        if len({m.id for m in self.metadata}) != len(self.metadata):
            raise DatasetError("index metadata ids are not unique")
        if matrix.size:
            norms = np.linalg.norm(matrix, axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
                raise NumericError("index descriptors must have unit L2 norm")
        matrix.setflags(write=False)
        self.descriptors = matrix
        self._ids = np.array([m.id for m in self.metadata], dtype=object)
        self._times = np.array([m.timestamp for m in self.metadata], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.metadata)

    def searchable(self, query: EntryMeta | None, mode: str, window: float) -> np.ndarray:
        """Boolean mask of rows a query may retrieve."""
        if mode not in SEARCH_MODES:
            raise ConfigError(f"search mode must be one of {SEARCH_MODES}, got {mode!r}")
        mask = np.ones(len(self), dtype=bool)
        if query is None:
            return mask
        mask &= self._ids != query.id
        if mode == 'intra':
            # strictly earlier entries, at least ``window`` seconds before the query
            mask &= self._times < query.timestamp
            mask &= (query.timestamp - self._times) >= window
        return mask

    def query(self, descriptor, query: EntryMeta | None = None, mode: str = 'inter', window: float = 0.0,
              top_k: int | None = None) -> list[Candidate]:
        """Candidates by ascending cosine distance, ties broken by id; empty when everything is excluded."""
        if len(self) == 0:
            raise DatasetError("cannot query an empty index")
        vector = np.asarray(descriptor, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(vector)
        if norm == 0 or not np.isfinite(norm):
            raise NumericError("query descriptor has zero or non-finite norm")
        rows = np.flatnonzero(self.searchable(query, mode, window))
        if rows.size == 0:
            return []
        distances = 1.0 - self.descriptors[rows] @ (vector / norm)
        order = np.lexsort((self._ids[rows].astype(str), distances))
        if top_k is not None:
            order = order[:top_k]
        return [Candidate(int(rows[i]), self.metadata[rows[i]].id, float(distances[i])) for i in order]
