"""Cross-layer label propagation, non-learned baselines and fusion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import UsageError
from .graph import SpatialGraph, circle_iou
from .records import ExpressionMatrix, FeatureMatrix, SampleStack

KNOWN, PROPAGATED, UNREACHED, FUSED = "known", "propagated", "unreached", "fused"


@dataclass(frozen=True)
class PropagationConfig:
    iterations: int = 10
    node_weights: Optional[np.ndarray] = field(default=None, compare=False)
    convergence_epsilon: float = 0.0

    def __post_init__(self):
        if self.iterations < 1:
            raise UsageError(f"iterations must be >= 1, got {self.iterations}")
        if self.node_weights is not None:
            w = np.asarray(self.node_weights, dtype=np.float64)
            if np.any(w < 0):
                raise UsageError("node weights must be non-negative")
            object.__setattr__(self, "node_weights", w)
        if self.convergence_epsilon < 0:
            raise UsageError("convergence_epsilon must be >= 0")


@dataclass(frozen=True, eq=False)
class ImputationResult:
    predictions: ExpressionMatrix
    provenance: tuple
    fusion_alpha: Optional[float] = None

    @property
    def reached_mask(self) -> np.ndarray:
        return np.array([p != UNREACHED for p in self.provenance])


def _prepare(labels: ExpressionMatrix, known_mask, n_nodes: int):
    known = np.asarray(known_mask, dtype=bool)
    if known.shape != (labels.rows,):
        raise UsageError(f"known_mask has shape {known.shape}, expected ({labels.rows},)")
    if n_nodes != labels.rows:
        raise UsageError(f"graph has {n_nodes} nodes but labels have {labels.rows} rows")
    if not known.any():
        raise UsageError("at least one known node is required")
    return known


def _initial(y, known):
    """Known rows as given, the rest at the mean known label."""
    k = y[known]
    # clip so rounding never pushes the mean outside the known range
    mean = np.clip(k.mean(axis=0), k.min(axis=0), k.max(axis=0))
    return np.where(known[:, None], y, mean)


def propagate_labels(graph: SpatialGraph, labels: ExpressionMatrix, known_mask,
                     cfg: PropagationConfig = PropagationConfig()) -> ImputationResult:
    """Iteratively spread known labels over the symmetrized graph.

    Unknown nodes start at the mean known label. On each (synchronous)
    step an unknown node with at least one reached neighbor takes the
    edge-weighted average of its reached neighbors' current values, each
    scaled by that neighbor's node weight. Known rows are never touched.
    """
    known = _prepare(labels, known_mask, graph.node_count)
    n = graph.node_count
    y = labels.values
    alpha = np.ones(n) if cfg.node_weights is None else cfg.node_weights
    if alpha.shape != (n,):
        raise UsageError(f"node_weights has shape {alpha.shape}, expected ({n},)")

    adj = graph.symmetric_matrix().tocoo()
    keep = (adj.row != adj.col) & (adj.data > 0)
    order = np.lexsort((adj.col[keep], adj.row[keep]))
    tgt = adj.row[keep][order].astype(np.int64)
    src = adj.col[keep][order].astype(np.int64)
    wt = adj.data[keep][order]
    unknown = ~known

    p = _initial(y, known)
    reached = known.copy()
    for _ in range(cfg.iterations):
        m = reached[src] & unknown[tgt]
        new = p.copy()
        if m.any():
            new = _weighted_step(p, alpha, tgt[m], src[m], wt[m], new)
        update = np.zeros(n, dtype=bool)
        update[tgt[m]] = True
        delta = np.max(np.abs(new - p)) if update.any() else 0.0
        grew = np.any(update & ~reached)
        p = new
        reached = reached | update
        if cfg.convergence_epsilon > 0 and delta < cfg.convergence_epsilon and not grew:
            break

    # bit-exact pass-through for known rows
    p[known] = y[known]
    prov = tuple(KNOWN if k else (PROPAGATED if r else UNREACHED) for k, r in zip(known, reached))
    return ImputationResult(labels.with_values(p), prov)


def _weighted_step(p, alpha, tgt, src, w, out):
    """One Jacobi update for the targets in ``tgt`` (sorted).

    The weighted mean is clipped to the range of the neighbour values it
    averages; mathematically a no-op, it keeps rounding from pushing a
    value outside that range (so identical neighbours reproduce exactly).
    """
    q = alpha[:, None] * p
    starts = np.flatnonzero(np.r_[True, tgt[1:] != tgt[:-1]])
    vals = q[src]
    num = np.add.reduceat(w[:, None] * vals, starts, axis=0)
    den = np.add.reduceat(w, starts)
    lo = np.minimum.reduceat(vals, starts, axis=0)
    hi = np.maximum.reduceat(vals, starts, axis=0)
    out[tgt[starts]] = np.clip(num / den[:, None], lo, hi)
    return out


def overlap_impute(stack: SampleStack, labels: ExpressionMatrix, known_mask) -> ImputationResult:
    """Each unknown spot takes the IoU-weighted mean of overlapping known spots
    on other layers; spots without any overlapping known spot are unreached.

    Sums are correctly rounded (``math.fsum``), so the result does not
    depend on accumulation order.
    """
    known = _prepare(labels, known_mask, stack.n_spots)
    y = labels.values
    pos, rad, layer = stack.aligned_centers, stack.aligned_radii, stack.layer_of
    p = _initial(y, known)
    kidx = np.flatnonzero(known)
    prov = []
    for i in range(stack.n_spots):
        if known[i]:
            prov.append(KNOWN)
            continue
        cand = kidx[layer[kidx] != layer[i]]
        near = cand[np.hypot(*(pos[cand] - pos[i]).T) < rad[i] + rad[cand]]
        pairs = [(j, circle_iou(pos[i], rad[i], pos[j], rad[j])) for j in near]
        pairs = [(j, w) for j, w in pairs if w > 0]
        if not pairs:
            prov.append(UNREACHED)
            continue
        den = math.fsum(w for _, w in pairs)
        p[i] = [math.fsum(w * y[j, g] for j, w in pairs) / den for g in range(y.shape[1])]
        prov.append(PROPAGATED)
    return ImputationResult(labels.with_values(p), tuple(prov))


def similarity_impute(features: FeatureMatrix, labels: ExpressionMatrix, known_mask,
                      m: int = 20) -> ImputationResult:
    """Unweighted mean of the ``m`` known spots most cosine-similar in feature space.

    Known spots with a zero-norm feature are never candidates; an unknown
    spot with a zero-norm feature is left unreached. Ties go to the lower
    spot index.
    """
    if m < 1:
        raise UsageError(f"m must be >= 1, got {m}")
    known = _prepare(labels, known_mask, features.rows)
    y, f = labels.values, features.values
    norms = np.linalg.norm(f, axis=1)
    p = _initial(y, known)
    cand = np.flatnonzero(known & (norms > 0))
    unit = np.zeros_like(f)
    nz = norms > 0
    unit[nz] = f[nz] / norms[nz, None]
    prov = []
    for i in range(features.rows):
        if known[i]:
            prov.append(KNOWN)
            continue
        if norms[i] == 0 or len(cand) == 0:
            prov.append(UNREACHED)
            continue
        sim = unit[cand] @ unit[i]
        top = cand[np.lexsort((cand, -sim))[:m]]
        p[i] = [math.fsum(col) / len(top) for col in y[top].T]
        prov.append(PROPAGATED)
    return ImputationResult(labels.with_values(p), tuple(prov))


def fuse_predictions(model_pred: ExpressionMatrix, imputed: ExpressionMatrix, alpha: float) -> ExpressionMatrix:
    """``alpha * model + (1 - alpha) * imputed``."""
    if model_pred.shape != imputed.shape:
        raise UsageError(f"shape mismatch: model {model_pred.shape} vs imputed {imputed.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must lie in [0, 1], got {alpha}")
    return model_pred.with_values(alpha * model_pred.values + (1.0 - alpha) * imputed.values)


def write_provenance(result: ImputationResult, spot_ids, path) -> None:
    alpha = "" if result.fusion_alpha is None else repr(float(result.fusion_alpha))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("spot_id", "provenance", "fusion_alpha"))
        for sid, prov in zip(spot_ids, result.provenance):
            w.writerow((sid, prov, alpha))
