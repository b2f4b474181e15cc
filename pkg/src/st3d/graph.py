"""Spot-level graph construction.

Two edge families are built per spot:

* intra-layer edges, weighted by inverse Euclidean distance between
  aligned centers;
* cross-layer edges, weighted by the overlap of the two aligned spot
  discs (IoU) plus the cosine similarity of their spot-level features.

Each source spot keeps its top-k candidates of each family, so the graph
is stored directed. Consumers that need symmetry call
:meth:`SpatialGraph.symmetric_matrix`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import ConsistencyError, DegenerateFeatureError, FormatError, InvalidGeometryError, UsageError
from .records import SampleStack, validate_stack

INTRA, CROSS = 0, 1
KIND_NAMES = ("intra_layer", "cross_layer")


class Edge(NamedTuple):
    src: int
    dst: int
    weight: float
    kind: str


# ---------------------------------------------------------------------------
# pairwise weights


def lens_area(d, r1, r2):
    """Area of the intersection of two discs at center distance ``d``.

    Vectorised over numpy broadcasting. Handles the disjoint and
    contained cases.
    """
    d = np.asarray(d, dtype=np.float64)
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    d, r1, r2 = np.broadcast_arrays(d, r1, r2)
    out = np.zeros(d.shape)
    rmin = np.minimum(r1, r2)

    # a vanishing distance would divide by zero below; the IoU is then 1 - O(d / r)
    contained = d <= np.maximum(np.abs(r1 - r2), 1e-12 * np.maximum(r1, r2))
    out[contained] = np.pi * rmin[contained] ** 2

    part = (~contained) & (d < r1 + r2)
    if np.any(part):
        dd, a, b = d[part], r1[part], r2[part]
        ca = np.clip((dd * dd + a * a - b * b) / (2 * dd * a), -1.0, 1.0)
        cb = np.clip((dd * dd + b * b - a * a) / (2 * dd * b), -1.0, 1.0)
        tri = (-dd + a + b) * (dd + a - b) * (dd - a + b) * (dd + a + b)
        out[part] = a * a * np.arccos(ca) + b * b * np.arccos(cb) - 0.5 * np.sqrt(np.maximum(tri, 0.0))
    return out


def circle_iou_array(d, r1, r2):
    """Vectorised IoU of discs given center distances and radii."""
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    if np.any(r1 <= 0) or np.any(r2 <= 0):
        raise InvalidGeometryError("circle radius must be positive")
    inter = lens_area(d, r1, r2)
    union = np.pi * r1 ** 2 + np.pi * r2 ** 2 - inter
    return np.clip(inter / union, 0.0, 1.0)


def circle_iou(c1, r1, c2, r2) -> float:
    """Exact IoU of the discs ``(c1, r1)`` and ``(c2, r2)``."""
    if not (r1 > 0 and r2 > 0):
        raise InvalidGeometryError(f"circle radius must be positive, got {r1} and {r2}")
    d = math.hypot(c1[0] - c2[0], c1[1] - c2[1])
    return float(circle_iou_array(d, r1, r2))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise UsageError(f"feature length mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateFeatureError("cosine similarity of a zero-norm feature vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cross_layer_weight(s1, s2, aligned: bool = True) -> float:
    """Overlap-plus-similarity weight between spots on different layers.

    ``s1`` and ``s2`` are mappings (or objects) with ``layer_index``,
    ``center``, ``radius`` and ``feature``; when ``aligned`` is false they
    must also carry ``transform`` used to map the center (and radius) into
    the reference frame.
    """
    g = _getter
    if g(s1, "layer_index") == g(s2, "layer_index"):
        raise UsageError("cross-layer weight requested for two spots on the same layer")
    c1, r1 = np.asarray(g(s1, "center"), float), float(g(s1, "radius"))
    c2, r2 = np.asarray(g(s2, "center"), float), float(g(s2, "radius"))
    if not aligned:
        t1, t2 = g(s1, "transform"), g(s2, "transform")
        c1, c2 = t1.apply(c1), t2.apply(c2)
        r1 *= math.sqrt(abs(t1.determinant))
        r2 *= math.sqrt(abs(t2.determinant))
    return circle_iou(c1, r1, c2, r2) + cosine_similarity(g(s1, "feature"), g(s2, "feature"))


def intra_layer_weight(s1, s2) -> float:
    g = _getter
    if g(s1, "layer_index") != g(s2, "layer_index"):
        raise UsageError("intra-layer weight requested for spots on different layers")
    c1, c2 = g(s1, "center"), g(s2, "center")
    dist = math.hypot(c1[0] - c2[0], c1[1] - c2[1])
    if dist == 0:
        raise InvalidGeometryError("two spots on one layer share a center (duplicate spot)")
    return 1.0 / dist


def _getter(obj, name):
    if isinstance(obj, dict):
        return obj[name]
    return getattr(obj, name)


def topk_select(candidates, k: int) -> list:
    """Largest ``k`` (index, weight) pairs; ties go to the lower index."""
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    return sorted(candidates, key=lambda c: (-c[1], c[0]))[:k]


def _topk_indices(idx: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
    """Array version of :func:`topk_select`, returns positions into ``idx``."""
    order = np.lexsort((idx, -w))
    return order[:k]


# ---------------------------------------------------------------------------
# graphs


@dataclass(frozen=True, eq=False)
class SpatialGraph:
    """Directed edge list stored as parallel arrays."""

    node_count: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    kind: np.ndarray
    k_intra: int
    k_cross: int
    directed: bool = True

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def edges(self) -> list:
        return [
            Edge(int(s), int(d), float(w), KIND_NAMES[k])
            for s, d, w, k in zip(self.src, self.dst, self.weight, self.kind)
        ]

    def restrict(self, kind: int) -> "SpatialGraph":
        m = self.kind == kind
        return SpatialGraph(self.node_count, self.src[m], self.dst[m], self.weight[m], self.kind[m],
                            self.k_intra if kind == INTRA else 0, self.k_cross if kind == CROSS else 0,
                            self.directed)

    def out_degree(self, kind=None) -> np.ndarray:
        m = np.ones(self.n_edges, bool) if kind is None else self.kind == kind
        return np.bincount(self.src[m], minlength=self.node_count)

    def symmetric_matrix(self) -> sp.csr_matrix:
        """Sparse symmetric weights: an edge in either direction, max weight."""
        n = self.node_count
        a = sp.coo_matrix((self.weight, (self.src, self.dst)), shape=(n, n)).tocsr()
        a.sum_duplicates()
        return a.maximum(a.T).tocsr()

    def neighbor_lists(self, self_loops: bool = True):
        """``(targets, sources)`` index arrays of the symmetrized graph.

        Each pair means information flows from ``sources[e]`` into
        ``targets[e]``. Sorted by target then source.
        """
        a = self.symmetric_matrix().tocoo()
        rows, cols = a.row.astype(np.int64), a.col.astype(np.int64)
        if self_loops:
            loop = np.arange(self.node_count, dtype=np.int64)
            keep = rows != cols
            rows = np.concatenate([rows[keep], loop])
            cols = np.concatenate([cols[keep], loop])
        order = np.lexsort((cols, rows))
        return rows[order], cols[order]


def _check(stack: SampleStack):
    problems = validate_stack(stack)
    if problems:
        raise ConsistencyError(
            f"sample {stack.sample_id!r} failed validation: " + "; ".join(v.message for v in problems)
        )


def _intra_edges(stack: SampleStack, k: int):
    src, dst, w = [], [], []
    pos = stack.aligned_centers
    for layer in stack.layers:
        rows = stack.layer_rows(layer.layer_index)
        if len(rows) < 2:
            continue
        p = pos[rows]
        dist = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
        off = ~np.eye(len(rows), dtype=bool)
        if np.any(dist[off] == 0):
            i, j = np.argwhere((dist == 0) & off)[0]
            raise InvalidGeometryError(
                f"spots {stack.spot_ids[rows[i]]} and {stack.spot_ids[rows[j]]} share a center"
            )
        with np.errstate(divide="ignore"):
            weight = 1.0 / dist
        for a, i in enumerate(rows):
            cand = np.delete(np.arange(len(rows)), a)
            sel = cand[_topk_indices(rows[cand], weight[a, cand], k)]
            src.extend([i] * len(sel))
            dst.extend(rows[sel])
            w.extend(weight[a, sel])
    return src, dst, w


def cross_weight_matrix(stack: SampleStack) -> np.ndarray:
    """Dense overlap-plus-cosine weights between all spot pairs.

    Same-layer pairs are set to ``nan``.
    """
    pos, rad = stack.aligned_centers, stack.aligned_radii
    f = stack.features.values
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise DegenerateFeatureError(f"spot {stack.spot_ids[bad]} has a zero-norm feature vector")
    unit = f / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    iou = circle_iou_array(d, rad[:, None], rad[None, :])
    w = iou + cos
    same = stack.layer_of[:, None] == stack.layer_of[None, :]
    w[same] = np.nan
    return w


def _cross_edges(stack: SampleStack, k: int):
    src, dst, w = [], [], []
    if stack.n_layers < 2:
        return src, dst, w
    weights = cross_weight_matrix(stack)
    idx = np.arange(stack.n_spots)
    for i in range(stack.n_spots):
        row = weights[i]
        cand = idx[(stack.layer_of != stack.layer_of[i]) & (row > 0)]
        if len(cand) == 0:
            continue
        sel = cand[_topk_indices(cand, row[cand], k)]
        src.extend([i] * len(sel))
        dst.extend(sel)
        w.extend(row[sel])
    return src, dst, w


def _assemble(n, parts, k_intra, k_cross) -> SpatialGraph:
    src, dst, w, kind = [], [], [], []
    for code, (s, d, ww) in parts:
        src.extend(s)
        dst.extend(d)
        w.extend(ww)
        kind.extend([code] * len(s))
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    kind = np.asarray(kind, dtype=np.int8)
    order = np.lexsort((dst, kind, src))
    return SpatialGraph(n, src[order], dst[order], w[order], kind[order], k_intra, k_cross)


def build_3d_graph(stack: SampleStack, k_intra: int = 8, k_cross: int = 12) -> SpatialGraph:
    """Intra-layer top-``k_intra`` plus pooled cross-layer top-``k_cross`` edges per spot."""
    if k_intra < 1 or k_cross < 1:
        raise UsageError("k_intra and k_cross must be >= 1")
    _check(stack)
    parts = [(INTRA, _intra_edges(stack, k_intra)), (CROSS, _cross_edges(stack, k_cross))]
    return _assemble(stack.n_spots, parts, k_intra, k_cross)


def build_2d_graph(stack: SampleStack, k: int = 12) -> SpatialGraph:
    """Intra-layer inverse-distance edges only."""
    if k < 1:
        raise UsageError("k must be >= 1")
    _check(stack)
    return _assemble(stack.n_spots, [(INTRA, _intra_edges(stack, k))], k, 0)


# ---------------------------------------------------------------------------
# TSV edge lists

EDGE_HEADER = ("src_spot_id", "dst_spot_id", "weight", "kind")


def write_edges(graph: SpatialGraph, spot_ids, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(EDGE_HEADER)
        for s, d, wt, k in zip(graph.src, graph.dst, graph.weight, graph.kind):
            w.writerow((spot_ids[s], spot_ids[d], f"{wt:.9g}", KIND_NAMES[k]))


def read_edges(path, spot_ids, k_intra: int = 0, k_cross: int = 0) -> SpatialGraph:
    index = {sid: i for i, sid in enumerate(spot_ids)}
    src, dst, w, kind = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if tuple(header or ()) != EDGE_HEADER:
            raise FormatError(f"{path}: expected header {EDGE_HEADER}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                src.append(index[row[0]])
                dst.append(index[row[1]])
            except KeyError as exc:
                raise ConsistencyError(f"{path}:{lineno}: unknown spot id {exc.args[0]!r}") from None
            try:
                w.append(float(row[2]))
                kind.append(KIND_NAMES.index(row[3]))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad weight or kind {row[2:]!r}") from None
    return SpatialGraph(
        len(spot_ids), np.asarray(src, np.int64), np.asarray(dst, np.int64),
        np.asarray(w, np.float64), np.asarray(kind, np.int8), k_intra, k_cross,
    )
