"""
Cosine distance and the margin triplet loss.
"""
from __future__ import annotations

import numpy as np

from descriptors.autograd import Tensor, hinge, l2_normalize
from forestlpr.exceptions import NumericError


def cosine_distance(a, b):
    """
    1 - <a, b> / (|a| |b|).

    Tensors give a tape value; plain arrays give a float. Zero vectors raise
    NumericError.
    """
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a = a if isinstance(a, Tensor) else Tensor(a)
        b = b if isinstance(b, Tensor) else Tensor(b)
        return 1.0 - (l2_normalize(a) * l2_normalize(b)).sum()
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0 or not np.isfinite(norm):
        raise NumericError("cosine distance of a zero or non-finite vector")
    return float(1.0 - a @ b / norm)


def triplet_loss(query, positive, negative, margin: float):
    """max(d(q, p) - d(q, n) + margin, 0)."""
    gap = cosine_distance(query, positive) - cosine_distance(query, negative) + margin
    if isinstance(gap, Tensor):
        return hinge(gap)
    return max(gap, 0.0)
