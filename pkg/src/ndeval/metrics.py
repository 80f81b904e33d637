"""Tie-aware AUROC via the Mann-Whitney rank statistic.

AUROC = P(outlier score > normal score) + 0.5 * P(equal), estimated over all
pairs. Computed by a single sort with midranks in O(n log n); the rank sums are
carried as exact integers (twice the midrank is integral), so the complement
identity auroc(a, b) + auroc(b, a) == 1.0 holds exactly in floating point.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ValidationError


def _checked(scores, name: str) -> np.ndarray:
    arr = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores,
                     dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"{name} scores must be a non-empty 1-d list")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} scores contain non-finite values")
    return arr


def _ratio(p2: int, d2: int) -> float:
    # fl(x + fl(1 - x)) == 1.0 for any float x in [0, 1/2], which makes the
    # complement identity exact; see module docstring.
    if 2 * p2 <= d2:
        return p2 / d2
    return 1.0 - (d2 - p2) / d2


def auroc(normal_scores, outlier_scores) -> float:
    """Probability a random outlier outscores a random normal, ties at half credit."""
    normal = _checked(normal_scores, "normal")
    outlier = _checked(outlier_scores, "outlier")
    n_n, n_o = normal.size, outlier.size

    pooled = np.concatenate([normal, outlier])
    order = np.argsort(pooled, kind="stable")
    svals = pooled[order]

    # twice the 1-based midrank of any sorted position in tie group [i, j] is i+j+2
    m = svals.size
    boundaries = np.flatnonzero(svals[1:] != svals[:-1]) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [m]]) - 1
    two_rank = np.repeat(starts + ends + 2, ends - starts + 1)

    is_outlier = order >= n_n
    two_rank_sum = int(two_rank[is_outlier].sum())
    p2 = two_rank_sum - n_o * (n_o + 1)       # twice the Mann-Whitney U statistic
    d2 = 2 * n_n * n_o
    return _ratio(p2, d2)
