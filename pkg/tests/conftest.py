import numpy as np
import pytest

from st3d.affine import AffineTransform2D
from st3d.records import ExpressionMatrix, FeatureMatrix, Layer, SampleStack, Spot


def make_stack(layer_points, features=None, expression=None, transforms=None, radius=112.0,
               known_layers=(0,), sample_id="T", genes=None, ref=0):
    """Build a stack from per-layer lists of (x, y) centers."""
    n = sum(len(p) for p in layer_points)
    rng = np.random.default_rng(0)
    if features is None:
        features = rng.normal(size=(n, 4))
    if expression is None:
        expression = rng.uniform(0.0, 3.0, size=(n, 3))
    expression = np.asarray(expression, dtype=np.float64)
    genes = genes or tuple(f"G{g}" for g in range(expression.shape[1]))
    layers, ids = [], []
    for li, pts in enumerate(layer_points):
        t = AffineTransform2D.identity() if transforms is None else transforms[li]
        spots = tuple(
            Spot(f"{sample_id}_L{li}_{j}", li, float(x), float(y), radius, li in known_layers)
            for j, (x, y) in enumerate(pts)
        )
        ids += [s.spot_id for s in spots]
        layers.append(Layer(li, spots, t, li == ref))
    return SampleStack(sample_id, tuple(layers), ExpressionMatrix(expression, genes, tuple(ids)),
                       FeatureMatrix(np.asarray(features, dtype=np.float64), "spot"))


def random_stack(rng, n_layers=3, n_spots=5, extent=600.0, radius=112.0, feat_dim=4, genes=3):
    pts = [rng.uniform(0, extent, size=(n_spots, 2)) for _ in range(n_layers)]
    n = n_layers * n_spots
    return make_stack(pts, rng.normal(size=(n, feat_dim)), rng.uniform(0, 3, size=(n, genes)),
                      radius=radius)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            for name, value in getattr(rep, "user_properties", ()):
                if name == "acceptance":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
