"""Gene selection, normalisation and multi-resolution label aggregation."""

from __future__ import annotations

import numpy as np

from ..errors import DataError, UsageError
from ..records import ExpressionMatrix, SampleStack

SPOT_PATCH, REGION_PATCH, GLOBAL_PATCH = 224, 512, 1024


def select_top_genes(expr: ExpressionMatrix, n: int = 250) -> ExpressionMatrix:
    """Keep the ``n`` genes with the highest mean, in their original order.

    Equal means are ranked by gene name ascending.
    """
    if n > expr.cols:
        raise UsageError(f"cannot select {n} genes from {expr.cols}")
    if n < 1:
        raise UsageError(f"n must be >= 1, got {n}")
    means = expr.values.mean(axis=0)
    names = np.array(expr.gene_names)
    ranked = np.lexsort((names, -means))
    return expr.take_genes(np.sort(ranked[:n]))


def normalize(expr: ExpressionMatrix, scale: float = 1e4):
    """``log(1 + scale * x / rowsum)`` per spot.

    Returns ``(normalized, flagged)`` where ``flagged`` lists the row
    indices whose sum was zero; those rows stay all-zero.
    """
    v = expr.values
    if np.any(v < 0):
        r, c = np.argwhere(v < 0)[0]
        raise DataError(f"negative count at row {r}, column {expr.gene_names[c]!r}")
    sums = v.sum(axis=1)
    flagged = np.flatnonzero(sums == 0).tolist()
    out = np.zeros_like(v)
    ok = sums > 0
    out[ok] = np.log1p(scale * v[ok] / sums[ok, None])
    return expr.with_values(out), flagged


def window_members(centers, groups, size: float) -> list:
    """For each point, indices of points in the same group whose centers lie in
    the axis-aligned ``size`` x ``size`` window centred on it.

    The window is half-open: ``-size/2 <= dx < size/2`` (same for ``dy``).
    """
    centers = np.asarray(centers, dtype=np.float64)
    groups = np.asarray(groups)
    half = size / 2.0
    out = []
    for g in np.unique(groups):
        rows = np.flatnonzero(groups == g)
        p = centers[rows]
        dx = p[None, :, 0] - p[:, None, 0]
        dy = p[None, :, 1] - p[:, None, 1]
        inside = (dx >= -half) & (dx < half) & (dy >= -half) & (dy < half)
        for a in range(len(rows)):
            out.append((rows[a], rows[inside[a]]))
    out.sort(key=lambda t: t[0])
    return [m for _, m in out]


def level_membership(stack: SampleStack):
    """Region and global membership sets for every spot of a stack.

    Membership is computed per layer in slide coordinates, since patches
    are cropped from that layer's own image.
    """
    region = window_members(stack.centers, stack.layer_of, REGION_PATCH)
    glob = window_members(stack.centers, stack.layer_of, GLOBAL_PATCH)
    return region, glob


def aggregate_levels(expr, region_sets, global_sets):
    """Region and global labels as sums of member spot labels.

    Returns ``(y_r, y_g, flagged)``; a spot whose membership set is empty
    falls back to its own label and is listed in ``flagged``.
    """
    y = expr.values if isinstance(expr, ExpressionMatrix) else np.asarray(expr, dtype=np.float64)
    if len(region_sets) != len(y) or len(global_sets) != len(y):
        raise UsageError("one membership set per spot is required")
    flagged = []

    def agg(sets):
        out = np.empty_like(y)
        for i, members in enumerate(sets):
            members = np.asarray(members, dtype=np.int64)
            if members.size == 0:
                out[i] = y[i]
                flagged.append(i)
            else:
                out[i] = y[members].sum(axis=0)
        return out

    y_r, y_g = agg(region_sets), agg(global_sets)
    return y_r, y_g, sorted(set(flagged))
