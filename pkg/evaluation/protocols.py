"""
Intra-sequence (loop closure) and inter-sequence (re-localization) evaluation.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from forestlpr.exceptions import ConfigError, DatasetError, UndefinedMetricError

from .index import EntryMeta, RetrievalIndex
from .metrics import QueryResult, max_f1, mrr, random_recall_at_1, recall_at_n
from .reports import EvalReport

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    success_radius: float = 3.0
    exclusion_window: float = 600.0
    top_k: int = 25
    recall_ns: tuple = (1, 5, 10, 25)
    radii: tuple = tuple(float(r) for r in range(1, 11))

    def __post_init__(self):
        object.__setattr__(self, 'recall_ns', tuple(int(n) for n in self.recall_ns))
        object.__setattr__(self, 'radii', tuple(float(r) for r in self.radii))
        if not self.success_radius > 0:
            raise ConfigError(f"success radius must be > 0, got {self.success_radius}")
        if self.exclusion_window < 0:
            raise ConfigError(f"exclusion window must be >= 0, got {self.exclusion_window}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if not self.recall_ns or min(self.recall_ns) < 1:
            raise ConfigError("recall_ns must list values >= 1")
        if any(not r > 0 for r in self.radii):
            raise ConfigError("radii must be > 0")

    def to_dict(self) -> dict:
        values = asdict(self)
        values['recall_ns'] = list(self.recall_ns)
        values['radii'] = list(self.radii)
        return values


def _lookup(ids, matrix) -> dict:
    matrix = np.asarray(matrix, dtype=np.float64)
    return {sid: matrix[row] for row, sid in enumerate(ids)}


def _entries(records, vectors: dict):
    missing = [r.id for r in records if r.id not in vectors]
    if missing:
        raise DatasetError(f"{len(missing)} submaps have no descriptor (first: {missing[0]!r})")
    metas = [EntryMeta.from_record(r) for r in records]
    matrix = np.stack([vectors[r.id] for r in records]) if records else np.zeros((0, 0))
    return metas, matrix


def _rank_all(index: RetrievalIndex, queries, vectors: dict, mode: str, window: float, jobs: int):
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(pool.map(lambda meta: (meta, index.query(vectors[meta.id], meta, mode, window)), queries))


def _results(index: RetrievalIndex, ranked, radius: float) -> list[QueryResult]:
    results = []
    for meta, candidates in ranked:
        if not candidates:
            continue
        positives = frozenset(c.id for c in candidates if index.metadata[c.row].distance_to(meta) <= radius)
        results.append(QueryResult(
            query_id=meta.id,
            ranked=tuple(c.id for c in candidates),
            similarities=tuple(c.similarity for c in candidates),
            positives=positives,
        ))
    return results


def _add_metric(report: EvalReport, protocol: str, pair: str, metric: str, compute):
    try:
        value = compute()
    except UndefinedMetricError as exc:
        logger.warning(f"{protocol} {pair}: {metric} undefined ({exc})")
        return None
    report.add(protocol, pair, metric, value)
    return value


def _summarize(report: EvalReport, protocol: str, pair: str, ranked, results, cfg: EvalConfig) -> dict:
    skipped = sum(1 for _, candidates in ranked if not candidates)
    if skipped:
        logger.info(f"{protocol} {pair}: {skipped} queries had no searchable database entries")
    report.add(protocol, pair, 'queries', len(ranked))
    report.add(protocol, pair, 'skipped_queries', skipped)
    report.add(protocol, pair, 'queries_with_positive', sum(1 for r in results if r.has_positive))
    values = {}
    for n in cfg.recall_ns:
        values[f'recall@{n}'] = _add_metric(report, protocol, pair, f'recall@{n}', lambda n=n: recall_at_n(results, n))
    values['max_f1'] = _add_metric(report, protocol, pair, 'max_f1', lambda: max_f1(results))
    values['mrr'] = _add_metric(report, protocol, pair, 'mrr', lambda: mrr(results, cfg.top_k))
    return values


def evaluate_intra(manifest, ids, matrix, cfg: EvalConfig, sequences=None, jobs: int = 1) -> EvalReport:
    """
    Every submap queries the earlier submaps of its own sequence.

    Per sequence: recall@N, max F1, MRR, the random-retrieval recall@1
    baseline, and recall@1 for every radius of ``cfg.radii``.
    """
    vectors = _lookup(ids, matrix)
    report = EvalReport()
    for sequence in sequences or manifest.sequences():
        records = sorted(manifest.for_sequence(sequence), key=lambda r: (r.timestamp, r.id))
        if not records:
            raise DatasetError(f"sequence {sequence!r} has no submaps")
        metas, descriptors = _entries(records, vectors)
        index = RetrievalIndex(descriptors, metas)
        ranked = _rank_all(index, metas, vectors, 'intra', cfg.exclusion_window, jobs)
        results = _results(index, ranked, cfg.success_radius)
        _summarize(report, 'intra', sequence, ranked, results, cfg)
        _add_metric(report, 'intra', sequence, 'random_recall@1', lambda: random_recall_at_1(results))
        for radius in cfg.radii:
            at_radius = _results(index, ranked, radius)
            scored = sum(1 for r in at_radius if r.has_positive)
            if scored:
                report.add_curve_point('intra', sequence, radius, recall_at_n(at_radius, 1), scored)
    return report


def evaluate_inter(manifest, ids, matrix, cfg: EvalConfig, query_sequences=None, database_sequences=None,
                   jobs: int = 1) -> EvalReport:
    """
    Each query sequence against each other database sequence, without a
    temporal window; recall@N and MRR per evaluation plus their macro-means.
    """
    vectors = _lookup(ids, matrix)
    all_sequences = manifest.sequences()
    queries = list(query_sequences or all_sequences)
    databases = list(database_sequences or all_sequences)
    evaluations = [(q, d) for q in queries for d in databases if q != d]
    if not evaluations:
        raise DatasetError("inter-sequence evaluation needs at least two distinct sequences")
    report = EvalReport()
    collected = {}
    for query_sequence, database_sequence in evaluations:
        query_records = sorted(manifest.for_sequence(query_sequence), key=lambda r: (r.timestamp, r.id))
        database_records = sorted(manifest.for_sequence(database_sequence), key=lambda r: (r.timestamp, r.id))
        if not query_records or not database_records:
            raise DatasetError(f"sequence pair {query_sequence}->{database_sequence} has an empty side")
        db_metas, db_matrix = _entries(database_records, vectors)
        query_metas, _ = _entries(query_records, vectors)
        index = RetrievalIndex(db_matrix, db_metas)
        ranked = _rank_all(index, query_metas, vectors, 'inter', 0.0, jobs)
        results = _results(index, ranked, cfg.success_radius)
        values = _summarize(report, 'inter', f'{query_sequence}->{database_sequence}', ranked, results, cfg)
        for metric, value in values.items():
            if value is not None:
                collected.setdefault(metric, []).append(value)
    for metric, values in collected.items():
        report.add('inter', 'mean', metric, float(np.mean(values)))
    return report
