from dataclasses import replace

import numpy as np
import pytest

from st3d.affine import AffineTransform2D
from st3d.records import ExpressionMatrix, FeatureMatrix, Layer, Spot, validate_stack

from conftest import make_stack


def two_layer():
    return make_stack([[(0, 0), (300, 0)], [(0, 10), (300, 10)]])


def kinds(stack):
    return [v.kind for v in validate_stack(stack)]


def test_well_formed_stack_is_valid():
    assert validate_stack(two_layer()) == []


def test_missing_expression_row():
    s = two_layer()
    bad = replace(s, expression=s.expression.take_rows([0, 1, 2]))
    assert kinds(bad) == ["row-count mismatch"]


def test_two_reference_layers():
    s = two_layer()
    layers = tuple(replace(layer, is_reference=True) for layer in s.layers)
    assert kinds(replace(s, layers=layers)) == ["reference layer"]


# one defect at a time, each must surface as exactly one violation kind
def _defects(s):
    l0, l1 = s.layers
    spot = l1.spots[0]
    yield "duplicate spot id", replace(s, layers=(l0, replace(l1, spots=(replace(spot, spot_id=l0.spots[0].spot_id),) + l1.spots[1:])))
    yield "non-positive radius", replace(s, layers=(l0, replace(l1, spots=(replace(spot, radius=0.0),) + l1.spots[1:])))
    yield "non-invertible transform", replace(s, layers=(l0, replace(l1, transform=AffineTransform2D(1, 2, 2, 4, 0, 0))))
    yield "reference layer", replace(s, layers=(replace(l0, transform=AffineTransform2D.translation(1, 0)), l1))
    yield "reference layer", replace(s, layers=(replace(l0, is_reference=False), l1))
    v = s.expression.values.copy()
    v[1, 2] = np.nan
    yield "non-finite values", replace(s, expression=s.expression.with_values(v))
    f = s.features.values.copy()
    f[0, 0] = np.inf
    yield "non-finite values", replace(s, features=FeatureMatrix(f, "spot"))
    yield "row-count mismatch", replace(s, features=FeatureMatrix(s.features.values[:3], "spot"))
    yield "duplicate gene name", replace(s, expression=ExpressionMatrix(s.expression.values, ("A", "A", "B")))
    yield "layer index", replace(s, layers=(l0, replace(l1, spots=(replace(spot, layer_index=0),) + l1.spots[1:])))


@pytest.mark.parametrize("idx", range(10))
def test_single_defect_gives_single_violation(idx):
    kind, bad = list(_defects(two_layer()))[idx]
    assert kinds(bad) == [kind]


def test_layers_sorted_and_rows_follow_enumeration():
    s = two_layer()
    swapped = replace(s, layers=(s.layers[1], s.layers[0]))
    assert [layer.layer_index for layer in swapped.layers] == [0, 1]
    assert swapped.spot_ids == s.spot_ids
    np.testing.assert_array_equal(swapped.layer_of, [0, 0, 1, 1])


def test_aligned_coordinates_and_radii():
    t = AffineTransform2D.rotation(0.3, 2.0)
    s = make_stack([[(0, 0)], [(1, 1)]], transforms=[AffineTransform2D.identity(), t])
    np.testing.assert_allclose(s.aligned_centers[1], t.apply(np.array([[1.0, 1.0]]))[0])
    np.testing.assert_allclose(s.aligned_radii, [112.0, 224.0])


def test_with_known_sets_flags():
    s = two_layer()
    m = np.array([False, True, True, False])
    np.testing.assert_array_equal(s.with_known(m).known_mask, m)


def test_default_radius():
    assert Spot("a", 0, 0.0, 0.0).radius == 112.0
