"""
Retrieval metrics: recall@N, maximum F1 over a top-1 similarity sweep and MRR.

Only queries with at least one true positive in their searchable database
count towards recall@N and MRR.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from forestlpr.exceptions import UndefinedMetricError


@dataclass(frozen=True)
class QueryResult:
    query_id: str
    ranked: tuple
    similarities: tuple
    positives: frozenset

    @property
    def has_positive(self) -> bool:
        return bool(self.positives)

    def first_positive_rank(self, limit: int | None = None) -> int | None:
        """1-based rank of the first true positive, searched within ``limit`` candidates."""
        ranked = self.ranked if limit is None else self.ranked[:limit]
        for rank, candidate in enumerate(ranked, start=1):
            if candidate in self.positives:
                return rank
        return None


def _with_positives(results) -> list[QueryResult]:
    scored = [r for r in results if r.has_positive]
    if not scored:
        raise UndefinedMetricError("no query has a true positive in its database")
    return scored


def recall_at_n(results, n: int) -> float:
    if n < 1:
        raise UndefinedMetricError(f"recall@N needs N >= 1, got {n}")
    scored = _with_positives(results)
    hits = sum(1 for r in scored if r.first_positive_rank(n) is not None)
    return hits / len(scored)


def mrr(results, k: int = 25) -> float:
    """Mean of 1/rank of the first positive, 0 when it is not in the top ``k``."""
    scored = _with_positives(results)
    total = 0.0
    for result in scored:
        rank = result.first_positive_rank(k)
        total += 1.0 / rank if rank is not None else 0.0
    return total / len(scored)


def f1_at(results, threshold: float) -> float:
    tp = fp = fn = 0
    for result in results:
        if not result.ranked:
            continue
        matched = result.similarities[0] >= threshold
        correct = result.ranked[0] in result.positives
        if matched and correct:
            tp += 1
        elif matched:
            fp += 1
        elif result.has_positive:
            fn += 1
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def max_f1(results, thresholds=None) -> float:
    """
    Best F1 over thresholds on the top-1 similarity.

    A query predicts a match when its top-1 similarity is >= the threshold.
    By default every distinct top-1 similarity is tried.
    """
    answered = [r for r in results if r.ranked]
    if not answered:
        raise UndefinedMetricError("max F1 needs at least one answered query")
    if thresholds is None:
        thresholds = np.unique([r.similarities[0] for r in answered])
    return max((f1_at(answered, float(t)) for t in thresholds), default=0.0)


def random_recall_at_1(results) -> float:
    """Expected recall@1 of a uniformly random retrieval over the same databases."""
    scored = _with_positives(results)
    return float(np.mean([len(r.positives) / len(r.ranked) for r in scored]))
