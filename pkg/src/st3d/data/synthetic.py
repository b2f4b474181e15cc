"""Seeded synthetic multi-layer samples.

Every sample shares one spot lattice (in the reference frame) across its
layers. Each gene is a smooth field built from random Gaussian bumps; a
layer sees ``sqrt(rho) * shared + sqrt(1 - rho) * own``. Spot features are
a fixed noisy linear projection of expression, so feature similarity
tracks expression similarity. The projection and per-gene constants come
from ``projection_seed`` and are therefore shared by every sample drawn
with the same value.

Slide coordinates are produced by pulling reference positions back
through a random near-rigid transform. ``jitter`` perturbs the true
transform's translation, so the stored transform carries registration
error of that magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..affine import AffineTransform2D, compose_transforms
from ..errors import UsageError
from ..records import ExpressionMatrix, FeatureMatrix, Layer, SampleStack, Spot
from .preprocess import level_membership


@dataclass(frozen=True)
class SyntheticSpec:
    layers: int = 3
    spots_per_layer: int = 200
    genes: int = 20
    length_scale: float = 500.0
    rho: float = 0.8
    jitter: float = 20.0
    seed: int = 0
    feature_dim: int = 16
    feature_noise: float = 1.0
    pitch: float = 240.0
    radius: float = 112.0
    projection_seed: int = 0
    sample_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise UsageError(f"rho must lie in [0, 1], got {self.rho}")
        for name in ("layers", "spots_per_layer", "genes", "feature_dim"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        if self.length_scale <= 0 or self.pitch <= 0 or self.radius <= 0:
            raise UsageError("length_scale, pitch and radius must be positive")
        if self.jitter < 0 or self.feature_noise < 0:
            raise UsageError("jitter and feature_noise must be non-negative")


def _lattice(n, pitch, rng):
    cols = int(math.ceil(math.sqrt(n)))
    ij = np.array([(k % cols, k // cols) for k in range(n)], dtype=np.float64)
    pos = ij * pitch
    # keep lattice neighbours further apart than one spot diameter
    pos += rng.uniform(-0.025 * pitch, 0.025 * pitch, size=pos.shape)
    return pos - pos.mean(axis=0)


def _bump_field(points, n_genes, length_scale, rng):
    lo, hi = points.min(axis=0) - length_scale, points.max(axis=0) + length_scale
    area = np.prod(hi - lo)
    n_bumps = max(4, int(round(2.0 * area / (math.pi * length_scale ** 2))))
    out = np.zeros((len(points), n_genes))
    for g in range(n_genes):
        centers = rng.uniform(lo, hi, size=(n_bumps, 2))
        amps = rng.normal(size=n_bumps)
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        out[:, g] = np.exp(-d2 / (2 * length_scale ** 2)) @ amps
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def generate_synthetic(spec: SyntheticSpec) -> SampleStack:
    fixed = np.random.default_rng([spec.projection_seed, 7919])
    baseline = fixed.uniform(0.0, 2.0, size=spec.genes)
    amplitude = fixed.uniform(0.5, 1.5, size=spec.genes)
    projection = fixed.normal(scale=1.0 / math.sqrt(spec.genes), size=(spec.genes, spec.feature_dim))
    offset = _softplus(baseline)

    rng = np.random.default_rng([spec.seed, 104729])
    ref_pos = _lattice(spec.spots_per_layer, spec.pitch, rng)

    shared = _bump_field(ref_pos, spec.genes, spec.length_scale, rng)
    fields = []
    for _ in range(spec.layers):
        own = _bump_field(ref_pos, spec.genes, spec.length_scale, rng)
        fields.append(math.sqrt(spec.rho) * shared + math.sqrt(1.0 - spec.rho) * own)
    scale = np.sqrt(np.mean(np.concatenate(fields) ** 2, axis=0))
    scale[scale == 0] = 1.0
    expr = np.concatenate([_softplus(baseline + amplitude * f / scale) for f in fields])

    signal = (expr - offset) @ projection
    signal *= 1.0 / max(np.std(signal), 1e-12)
    spot_feat = signal + spec.feature_noise * rng.normal(size=signal.shape)

    ref_index = spec.layers // 2
    sid = spec.sample_id or f"S{spec.seed}"
    layers = []
    n = spec.spots_per_layer
    for li in range(spec.layers):
        if li == ref_index:
            stored = AffineTransform2D.identity()
            true = stored
        else:
            theta = math.radians(rng.uniform(-3.0, 3.0))
            stored = compose_transforms(
                AffineTransform2D.translation(*rng.uniform(-100.0, 100.0, size=2)),
                AffineTransform2D.rotation(theta, rng.uniform(0.98, 1.02)),
            )
            err = rng.normal(scale=spec.jitter, size=2) if spec.jitter > 0 else np.zeros(2)
            true = compose_transforms(AffineTransform2D.translation(*err), stored)
        slide = true.inverse().apply(ref_pos)
        spots = tuple(
            Spot(f"{sid}_L{li}_S{j:04d}", li, float(slide[j, 0]), float(slide[j, 1]),
                 spec.radius, known=(li == 0))
            for j in range(n)
        )
        layers.append(Layer(li, spots, stored, li == ref_index))

    genes = tuple(f"G{g:03d}" for g in range(spec.genes))
    ids = tuple(s.spot_id for layer in layers for s in layer.spots)
    stack = SampleStack(sid, tuple(layers), ExpressionMatrix(expr, genes, ids),
                        FeatureMatrix(_f32(spot_feat), "spot"))

    region, glob = level_membership(stack)
    reg = np.stack([signal[m].mean(axis=0) for m in region])
    glb = np.stack([signal[m].mean(axis=0) for m in glob])
    reg += 0.5 * spec.feature_noise * rng.normal(size=reg.shape)
    glb += 0.5 * spec.feature_noise * rng.normal(size=glb.shape)
    return SampleStack(sid, stack.layers, stack.expression, stack.features,
                       FeatureMatrix(_f32(reg), "region"), FeatureMatrix(_f32(glb), "global"))


def _f32(v):
    # features live on disk as float32; round here so round-trips are exact
    return np.asarray(v, dtype=np.float32).astype(np.float64)


def generate_batch(n_samples: int, base: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> list:
    """``n_samples`` stacks with seeds ``seed, seed+1, ...`` and shared projection."""
    from dataclasses import replace
    return [
        generate_synthetic(replace(base, seed=seed + i, sample_id=f"S{seed + i:03d}"))
        for i in range(n_samples)
    ]


def cross_layer_correlation(stack: SampleStack) -> float:
    """Mean over corresponding spots and layer pairs of the across-gene
    Pearson correlation of gene-centred expression.

    Assumes every layer lists its spots in the same lattice order.
    """
    counts = {len(layer) for layer in stack.layers}
    if len(counts) != 1 or stack.n_layers < 2:
        raise UsageError("cross_layer_correlation needs >= 2 layers of equal size")
    per_layer = [stack.expression.values[stack.layer_rows(layer.layer_index)] for layer in stack.layers]
    centred = [x - x.mean(axis=0) for x in per_layer]
    vals = []
    for a in range(len(centred)):
        for b in range(a + 1, len(centred)):
            x, y = centred[a], centred[b]
            x = x - x.mean(axis=1, keepdims=True)
            y = y - y.mean(axis=1, keepdims=True)
            den = np.sqrt((x * x).sum(1) * (y * y).sum(1))
            ok = den > 0
            vals.append(((x * y).sum(1)[ok] / den[ok]))
    return float(np.mean(np.concatenate(vals)))
