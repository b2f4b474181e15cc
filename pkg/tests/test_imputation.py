import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from st3d.errors import UsageError
from st3d.graph import SpatialGraph, build_3d_graph
from st3d.imputation import (
    KNOWN, PROPAGATED, UNREACHED, PropagationConfig, fuse_predictions, overlap_impute, propagate_labels,
    similarity_impute, write_provenance,
)
from st3d.records import ExpressionMatrix, FeatureMatrix

from conftest import make_stack, random_stack
from oracles import overlap_oracle, propagate_once_reference, sim_oracle


def graph(n, edges):
    src = np.array([e[0] for e in edges], dtype=np.int64)
    dst = np.array([e[1] for e in edges], dtype=np.int64)
    w = np.array([e[2] for e in edges], dtype=np.float64)
    return SpatialGraph(n, src, dst, w, np.zeros(len(edges), np.int8), 8, 0)


def labels(values):
    v = np.asarray(values, dtype=np.float64)
    return ExpressionMatrix(v.reshape(len(v), -1), tuple(f"G{i}" for i in range(v.reshape(len(v), -1).shape[1])))


def chain(w_ab, w_bc):
    return graph(3, [(0, 1, w_ab), (1, 2, w_bc)])


def test_symmetric_chain_single_step():
    r = propagate_labels(chain(1, 1), labels([1, 0, 0]), [True, False, True], PropagationConfig(1))
    assert r.predictions.values[1, 0] == 0.5


def test_weighted_chain_two_thirds():
    r = propagate_labels(chain(2, 1), labels([1, 0, 0]), [True, False, True], PropagationConfig(1))
    assert r.predictions.values[1, 0] == 2 / 3
    assert r.provenance == (KNOWN, PROPAGATED, KNOWN)


def test_all_known_is_identity():
    y = labels(np.arange(6.0).reshape(3, 2))
    r = propagate_labels(chain(1, 1), y, [True] * 3)
    np.testing.assert_array_equal(r.predictions.values, y.values)
    assert r.provenance == (KNOWN,) * 3


def test_no_known_nodes_rejected():
    with pytest.raises(UsageError):
        propagate_labels(chain(1, 1), labels([1, 0, 0]), [False] * 3)


def test_unreached_node_keeps_mean_and_is_flagged():
    g = graph(4, [(0, 1, 1.0)])
    r = propagate_labels(g, labels([2.0, 0, 4.0, 0]), [True, False, True, False], PropagationConfig(3))
    assert r.provenance[3] == UNREACHED
    assert r.predictions.values[3, 0] == 3.0


def test_node_weights_scale_neighbour_values():
    g = chain(1, 1)
    cfg = PropagationConfig(1, node_weights=np.array([0.5, 1.0, 1.0]))
    r = propagate_labels(g, labels([2.0, 0, 2.0]), [True, False, True], cfg)
    assert r.predictions.values[1, 0] == pytest.approx((0.5 * 2 + 2) / 2)


@pytest.mark.parametrize("seed", range(5))
def test_matches_loop_reference(seed):
    rng = np.random.default_rng(seed)
    n = 12
    pairs = {(i, j): rng.uniform(0.1, 2) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.25}
    g = graph(n, [(i, j, w) for (i, j), w in pairs.items()])
    y = rng.normal(size=(n, 3))
    known = rng.random(n) < 0.3
    known[0] = True
    for it in (1, 2, 5):
        r = propagate_labels(g, labels(y), known, PropagationConfig(it))
        ref, reached = propagate_once_reference(n, pairs, y.tolist(), known.tolist(), it)
        np.testing.assert_allclose(r.predictions.values, ref, atol=1e-12)
        assert list(r.reached_mask) == reached


def random_case(seed):
    rng = np.random.default_rng(seed)
    s = random_stack(rng, 3, 10, extent=400)
    known = rng.random(s.n_spots) < 0.3
    known[0] = True
    return s, build_3d_graph(s, 3, 3), known


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_known_rows_bit_exact_and_bounded(seed, iters):
    s, g, known = random_case(seed)
    y = s.expression.values
    r = propagate_labels(g, s.expression, known, PropagationConfig(iters))
    p = r.predictions.values
    assert np.array_equal(p[known], y[known])
    lo, hi = y[known].min(axis=0), y[known].max(axis=0)
    assert np.all(p >= lo - 1e-12) and np.all(p <= hi + 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_uniform_labels_fixed_point_after_one_step(seed):
    s, g, known = random_case(seed)
    y = np.where(known[:, None], np.array([1.5, -2.0, 0.25]), 9.0)
    r = propagate_labels(g, s.expression.with_values(y), known, PropagationConfig(1))
    p = r.predictions.values
    np.testing.assert_array_equal(p[r.reached_mask], np.broadcast_to([1.5, -2.0, 0.25], p[r.reached_mask].shape))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_coverage_monotone_and_deterministic(seed):
    s, g, known = random_case(seed)
    prev = None
    for it in range(1, 6):
        r = propagate_labels(g, s.expression, known, PropagationConfig(it))
        if prev is not None:
            assert np.all(r.reached_mask >= prev)
        prev = r.reached_mask
    again = propagate_labels(g, s.expression, known, PropagationConfig(5))
    assert np.array_equal(again.predictions.values, r.predictions.values)


def test_convergence_epsilon_stops_early():
    r = propagate_labels(chain(1, 1), labels([1, 0, 0]), [True, False, True], PropagationConfig(50, convergence_epsilon=1e-9))
    assert r.predictions.values[1, 0] == 0.5


# --- overlap baseline


def test_overlap_single_full_cover():
    s = make_stack([[(0, 0)], [(0, 0)]], expression=[[2.0, 4.0], [0.0, 0.0]])
    r = overlap_impute(s, s.expression, [True, False])
    np.testing.assert_array_equal(r.predictions.values[1], [2.0, 4.0])


def test_overlap_two_equal_neighbours():
    s = make_stack([[(-50, 0), (50, 0)], [(0, 0)]], expression=[[0.0], [1.0], [7.0]], radius=112)
    r = overlap_impute(s, s.expression, [True, True, False])
    assert r.predictions.values[2, 0] == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_overlap_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    s = random_stack(rng, 3, 10, extent=400)
    known = rng.random(s.n_spots) < 0.4
    known[0] = True
    r = overlap_impute(s, s.expression, known)
    np.testing.assert_array_equal(r.predictions.values, overlap_oracle(s, s.expression.values, known))


# --- similarity baseline


def test_similarity_two_point_mean():
    f = FeatureMatrix(np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]), "spot")
    r = similarity_impute(f, labels([0.0, 1.0, 3.0]), [False, True, True], m=2)
    assert r.predictions.values[0, 0] == 2.0


def test_similarity_exact_twin():
    f = FeatureMatrix(np.array([[1.0, 2.0], [1.0, 2.0], [2.0, -1.0]]), "spot")
    r = similarity_impute(f, labels([0.0, 5.0, 3.0]), [False, True, True], m=1)
    assert r.predictions.values[0, 0] == 5.0


def test_similarity_skips_zero_norm_candidates():
    f = FeatureMatrix(np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.1]]), "spot")
    r = similarity_impute(f, labels([0.0, 100.0, 3.0]), [False, True, True], m=2)
    assert r.predictions.values[0, 0] == 3.0


@pytest.mark.parametrize("seed", range(5))
def test_similarity_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(30, 5))
    y = rng.normal(size=(30, 3))
    known = rng.random(30) < 0.5
    r = similarity_impute(FeatureMatrix(f, "spot"), labels(y), known, m=5)
    np.testing.assert_array_equal(r.predictions.values, sim_oracle(f, y, known, 5))


# --- fusion


def test_fusion_boundaries_and_midpoint():
    a, b = labels([[0.2]]), labels([[0.6]])
    assert fuse_predictions(a, b, 1.0).values[0, 0] == 0.2
    assert fuse_predictions(a, b, 0.0).values[0, 0] == 0.6
    assert fuse_predictions(a, b, 0.5).values[0, 0] == pytest.approx(0.4)
    with pytest.raises(UsageError):
        fuse_predictions(a, labels([[1.0], [2.0]]), 0.5)


def test_write_provenance(tmp_path):
    r = propagate_labels(chain(2, 1), labels([1, 0, 0]), [True, False, True], PropagationConfig(1))
    path = tmp_path / "p.tsv"
    write_provenance(r, ("a", "b", "c"), path)
    lines = path.read_text().splitlines()
    assert lines[0].split("\t")[:2] == ["spot_id", "provenance"]
    assert lines[2].split("\t")[:2] == ["b", "propagated"]
