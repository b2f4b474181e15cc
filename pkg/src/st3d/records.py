"""Core domain records: spots, layers, matrices and registered sample stacks.

Records are frozen dataclasses.  Construction never validates the whole
stack; use :func:`validate_stack` to get a list of violations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .affine import AffineTransform2D

DEFAULT_RADIUS = 112.0
LEVELS = ("spot", "region", "global")


@dataclass(frozen=True)
class Spot:
    spot_id: str
    layer_index: int
    x: float
    y: float
    radius: float = DEFAULT_RADIUS
    known: bool = False

    @property
    def center(self) -> tuple:
        return (self.x, self.y)


@dataclass(frozen=True)
class Layer:
    layer_index: int
    spots: tuple
    transform: AffineTransform2D = field(default_factory=AffineTransform2D)
    is_reference: bool = False

    def __post_init__(self):
        object.__setattr__(self, "spots", tuple(self.spots))

    def __len__(self):
        return len(self.spots)


@dataclass(frozen=True, eq=False)
class ExpressionMatrix:
    """Spots x genes matrix with a gene-name header.

    ``spot_ids`` is optional; when present it has one entry per row.
    """

    values: np.ndarray
    gene_names: tuple
    spot_ids: Optional[tuple] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            values = values.reshape(len(values), -1)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gene_names", tuple(str(g) for g in self.gene_names))
        if self.spot_ids is not None:
            object.__setattr__(self, "spot_ids", tuple(str(s) for s in self.spot_ids))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def with_values(self, values) -> "ExpressionMatrix":
        return replace(self, values=np.asarray(values, dtype=np.float64))

    def take_rows(self, idx) -> "ExpressionMatrix":
        idx = np.asarray(idx)
        ids = None if self.spot_ids is None else tuple(np.asarray(self.spot_ids)[idx])
        return ExpressionMatrix(self.values[idx], self.gene_names, ids)

    def take_genes(self, cols) -> "ExpressionMatrix":
        cols = np.asarray(cols, dtype=int)
        names = tuple(self.gene_names[i] for i in cols)
        return ExpressionMatrix(self.values[:, cols], names, self.spot_ids)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    level: str = "spot"

    def __post_init__(self):
        object.__setattr__(self, "values", np.atleast_2d(np.asarray(self.values, dtype=np.float64)))
        if self.level not in LEVELS:
            raise ValueError(f"unknown feature level {self.level!r}; expected one of {LEVELS}")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class SampleStack:
    """A registered multi-layer sample.

    Matrix rows follow the spot enumeration order: layers in ascending
    ``layer_index``, then the order spots appear within each layer.
    """

    sample_id: str
    layers: tuple
    expression: ExpressionMatrix
    features: FeatureMatrix
    region_features: Optional[FeatureMatrix] = None
    global_features: Optional[FeatureMatrix] = None

    def __post_init__(self):
        layers = tuple(sorted(self.layers, key=lambda layer: layer.layer_index))
        object.__setattr__(self, "layers", layers)

    @cached_property
    def spots(self) -> tuple:
        return tuple(s for layer in self.layers for s in layer.spots)

    @property
    def n_spots(self) -> int:
        return len(self.spots)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @cached_property
    def spot_ids(self) -> tuple:
        return tuple(s.spot_id for s in self.spots)

    @cached_property
    def layer_of(self) -> np.ndarray:
        """Layer index per spot row."""
        return np.array([layer.layer_index for layer in self.layers for _ in layer.spots], dtype=np.int64)

    @cached_property
    def centers(self) -> np.ndarray:
        """Slide (pre-alignment) coordinates, shape ``(n, 2)``."""
        return np.array([(s.x, s.y) for s in self.spots], dtype=np.float64).reshape(-1, 2)

    @cached_property
    def radii(self) -> np.ndarray:
        return np.array([s.radius for s in self.spots], dtype=np.float64)

    @cached_property
    def known_mask(self) -> np.ndarray:
        return np.array([s.known for s in self.spots], dtype=bool)

    @cached_property
    def aligned_centers(self) -> np.ndarray:
        """Centers mapped into the reference layer's frame."""
        out = np.empty((self.n_spots, 2))
        start = 0
        for layer in self.layers:
            stop = start + len(layer)
            out[start:stop] = layer.transform.apply(self.centers[start:stop])
            start = stop
        return out

    @cached_property
    def aligned_radii(self) -> np.ndarray:
        """Radii scaled by each layer transform's linear scale factor."""
        scale = np.concatenate(
            [np.full(len(layer), np.sqrt(abs(layer.transform.determinant))) for layer in self.layers]
        )
        return self.radii * scale

    def layer_rows(self, layer_index: int) -> np.ndarray:
        return np.flatnonzero(self.layer_of == layer_index)

    def feature_level(self, level: str) -> Optional[FeatureMatrix]:
        return {"spot": self.features, "region": self.region_features, "global": self.global_features}[level]

    def with_known(self, mask) -> "SampleStack":
        """Copy of the stack with the ``known`` flag set from a boolean vector."""
        mask = np.asarray(mask, dtype=bool)
        it = iter(mask.tolist())
        layers = tuple(
            replace(layer, spots=tuple(replace(s, known=next(it)) for s in layer.spots))
            for layer in self.layers
        )
        return replace(self, layers=layers)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str


def validate_stack(s: SampleStack) -> list:
    """Return every invariant violation found in ``s`` (empty when well-formed)."""
    out = []
    n = sum(len(layer) for layer in s.layers)

    if s.expression.rows != n:
        out.append(Violation("row-count mismatch",
                             f"expression has {s.expression.rows} rows but stack has {n} spots"))
    for fm in (s.features, s.region_features, s.global_features):
        if fm is not None and fm.rows != n:
            out.append(Violation("row-count mismatch",
                                 f"{fm.level} features have {fm.rows} rows but stack has {n} spots"))
    if len(s.expression.gene_names) != s.expression.cols:
        out.append(Violation("gene dimension",
                             f"{len(s.expression.gene_names)} gene names for {s.expression.cols} columns"))
    if len(set(s.expression.gene_names)) != len(s.expression.gene_names):
        out.append(Violation("duplicate gene name", "gene names are not unique"))

    seen, dups = set(), []
    for layer in s.layers:
        for sp in layer.spots:
            if sp.spot_id in seen:
                dups.append(sp.spot_id)
            seen.add(sp.spot_id)
            if sp.layer_index != layer.layer_index:
                out.append(Violation("layer index",
                                     f"spot {sp.spot_id} says layer {sp.layer_index}, stored in {layer.layer_index}"))
            if not (sp.radius > 0):
                out.append(Violation("non-positive radius", f"spot {sp.spot_id} has radius {sp.radius}"))
            if not (np.isfinite(sp.x) and np.isfinite(sp.y)):
                out.append(Violation("non-finite values", f"spot {sp.spot_id} has a non-finite center"))
    if dups:
        out.append(Violation("duplicate spot id", f"duplicate spot ids: {sorted(set(dups))}"))

    indices = [layer.layer_index for layer in s.layers]
    if len(set(indices)) != len(indices):
        out.append(Violation("layer index", f"layer indices repeat: {indices}"))

    for layer in s.layers:
        if not layer.transform.is_invertible:
            out.append(Violation("non-invertible transform",
                                 f"layer {layer.layer_index} transform has determinant {layer.transform.determinant}"))
    refs = [layer for layer in s.layers if layer.is_reference]
    if len(refs) != 1:
        out.append(Violation("reference layer", f"expected exactly one reference layer, found {len(refs)}"))
    elif not refs[0].transform.is_identity:
        out.append(Violation("reference layer",
                             f"reference layer {refs[0].layer_index} has a non-identity transform"))

    if not np.all(np.isfinite(s.expression.values)):
        r, c = np.argwhere(~np.isfinite(s.expression.values))[0]
        out.append(Violation("non-finite values", f"expression row {r}, column {c} is not finite"))
    for fm in (s.features, s.region_features, s.global_features):
        if fm is not None and not np.all(np.isfinite(fm.values)):
            r, c = np.argwhere(~np.isfinite(fm.values))[0]
            out.append(Violation("non-finite values", f"{fm.level} features row {r}, column {c} is not finite"))
    return out


def concat_expression(mats: Sequence[ExpressionMatrix]) -> ExpressionMatrix:
    names = mats[0].gene_names
    ids = None
    if all(m.spot_ids is not None for m in mats):
        ids = tuple(i for m in mats for i in m.spot_ids)
    return ExpressionMatrix(np.vstack([m.values for m in mats]), names, ids)
